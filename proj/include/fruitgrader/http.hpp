#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "fruitgrader/service.hpp"

namespace httplib {
class Server;
}

namespace fruitgrader::service {

struct HttpOptions {
    std::string host = "0.0.0.0";
    int port = 8080;  // 0 picks a free port
    /// Allowed browser origin for CORS; unset disables CORS headers.
    std::optional<std::string> ui_origin;
    /// Static files served at "/" (the built operator UI).
    std::optional<std::filesystem::path> ui_dir;
};

/// Routes under /api/ onto a Service:
///   POST /api/images (PNG body), GET /api/images/{id}, POST /api/detect,
///   POST /api/classify, POST /api/grade, GET /api/models.
class HttpServer {
public:
    explicit HttpServer(Service& service, HttpOptions options = {});
    ~HttpServer();

    /// Binds and returns the bound port. Throws InvalidArgument on failure.
    int bind();
    /// Serves until stop(); call after bind().
    void run();
    void stop();
    void wait_until_ready() const;

private:
    std::unique_ptr<httplib::Server> server_;
    HttpOptions options_;
};

}  // namespace fruitgrader::service
