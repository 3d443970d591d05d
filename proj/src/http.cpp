#include "fruitgrader/http.hpp"

#include <httplib.h>

#include "fruitgrader/error.hpp"

namespace fruitgrader::service {
namespace {

void send(httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
}

}  // namespace

HttpServer::HttpServer(Service& service, HttpOptions options)
    : server_(std::make_unique<httplib::Server>()), options_(std::move(options)) {
    auto& srv = *server_;
    // Leave headroom so moderately oversized uploads get the service's JSON 413.
    srv.set_payload_max_length(2 * service.config().max_upload_bytes + (1u << 20));

    if (options_.ui_origin) {
        const std::string origin = *options_.ui_origin;
        srv.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Origin", origin);
            res.set_header("Vary", "Origin");
        });
        srv.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type");
            res.status = 204;
        });
    }

    srv.Post("/api/images", [&service](const httplib::Request& req, httplib::Response& res) {
        send(res, service.upload(req.body));
    });
    srv.Get(R"(/api/images/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
        send(res, service.image(req.matches[1]));
    });
    srv.Post("/api/detect", [&service](const httplib::Request& req, httplib::Response& res) {
        send(res, service.detect(req.body));
    });
    srv.Post("/api/classify", [&service](const httplib::Request& req, httplib::Response& res) {
        send(res, service.classify(req.body));
    });
    srv.Post("/api/grade", [&service](const httplib::Request& req, httplib::Response& res) {
        send(res, service.grade(req.body));
    });
    srv.Get("/api/models", [&service](const httplib::Request&, httplib::Response& res) {
        send(res, service.models());
    });

    if (options_.ui_dir && !srv.set_mount_point("/", options_.ui_dir->string())) {
        throw Error(ErrorKind::InvalidArgument, "ui directory " + options_.ui_dir->string() + " does not exist");
    }
}

HttpServer::~HttpServer() = default;

int HttpServer::bind() {
    if (options_.port == 0) {
        const int port = server_->bind_to_any_port(options_.host);
        if (port < 0) throw Error(ErrorKind::InvalidArgument, "cannot bind " + options_.host);
        return port;
    }
    if (!server_->bind_to_port(options_.host, options_.port)) {
        throw Error(ErrorKind::InvalidArgument,
                    "cannot bind " + options_.host + ":" + std::to_string(options_.port));
    }
    return options_.port;
}

void HttpServer::run() { server_->listen_after_bind(); }

void HttpServer::stop() { server_->stop(); }

void HttpServer::wait_until_ready() const { server_->wait_until_ready(); }

}  // namespace fruitgrader::service
