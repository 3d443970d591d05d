#include "fruitgrader/service.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <thread>
#include <unistd.h>

#include "fruitgrader/codec.hpp"
#include "fruitgrader/error.hpp"

namespace fruitgrader::service {
namespace {

Response json_response(int status, const nlohmann::json& body) {
    return {status, "application/json", body.dump()};
}

Response error_response(int status, const std::string& message) {
    return json_response(status, {{"error", message}});
}

nlohmann::json arch_info(const nn::Network& net) {
    return {{"architecture", net.spec().name},
            {"input", {net.spec().input.channels, net.spec().input.height, net.spec().input.width}},
            {"class_names", net.class_names()},
            {"parameters", net.parameter_count()}};
}

// Parses a JSON request body; nullopt means the body was not an object.
std::optional<nlohmann::json> parse_body(std::string_view body) {
    auto j = nlohmann::json::parse(body.begin(), body.end(), nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    return j;
}

}  // namespace

LoadedModels LoadedModels::from_pipeline(pipeline::PipelineModel model, std::string source) {
    LoadedModels m;
    m.detector = std::move(model.detector);
    m.ripeness = std::move(model.ripeness_net);
    m.disease = std::move(model.disease_net);
    m.disease_trigger = std::move(model.disease_trigger);
    m.source = std::move(source);
    return m;
}

LoadedModels load_models_dir(const std::filesystem::path& dir) {
    if (std::filesystem::exists(dir / "pipeline.fgpm")) {
        return LoadedModels::from_pipeline(pipeline::load_pipeline(dir / "pipeline.fgpm"),
                                           (dir / "pipeline.fgpm").string());
    }
    LoadedModels m;
    m.source = dir.string();
    if (std::filesystem::exists(dir / "detector.json")) {
        std::ifstream in(dir / "detector.json");
        try {
            m.detector = nlohmann::json::parse(in).get<cascade::CascadeModel>();
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::MalformedFile, "detector.json: " + std::string(e.what()));
        }
    }
    if (std::filesystem::exists(dir / "ripeness.fgpm")) m.ripeness = pipeline::load_network(dir / "ripeness.fgpm");
    if (std::filesystem::exists(dir / "disease.fgpm")) m.disease = pipeline::load_network(dir / "disease.fgpm");
    return m;
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error(ErrorKind::InvalidArgument, "sha256 failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[digest[i] >> 4]);
        out.push_back(kHex[digest[i] & 15]);
    }
    return out;
}

ImageStore::ImageStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
}

bool ImageStore::valid_id(std::string_view id) noexcept {
    return id.size() == 64 &&
           std::all_of(id.begin(), id.end(), [](char c) { return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'); });
}

std::filesystem::path ImageStore::path_of(const std::string& id) const { return dir_ / (id + ".png"); }

std::string ImageStore::put(std::string_view bytes) {
    static std::atomic<unsigned long> counter{0};
    const std::string id = sha256_hex(bytes);
    const auto target = path_of(id);
    if (std::filesystem::exists(target)) return id;
    auto tmp = dir_ / (id + ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::InvalidArgument, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error(ErrorKind::InvalidArgument, "short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, target);
    return id;
}

std::optional<std::vector<std::uint8_t>> ImageStore::get(const std::string& id) const {
    if (!valid_id(id) || !std::filesystem::exists(path_of(id))) return std::nullopt;
    return imaging::read_file_bytes(path_of(id));
}

bool ImageStore::contains(const std::string& id) const {
    return valid_id(id) && std::filesystem::exists(path_of(id));
}

std::size_t ImageStore::prune(std::chrono::seconds max_age) {
    const auto now = std::filesystem::file_time_type::clock::now();
    std::size_t removed = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir_)) {
        if (!entry.is_regular_file()) continue;
        if (now - entry.last_write_time() >= max_age) removed += std::filesystem::remove(entry.path()) ? 1 : 0;
    }
    return removed;
}

Service::Service(ServiceConfig config, LoadedModels models)
    : config_(std::move(config)), models_(std::move(models)), store_(config_.image_dir) {
    if (models_.complete()) {
        pipeline::PipelineModel p;
        p.detector = std::move(*models_.detector);
        p.ripeness_net = std::move(*models_.ripeness);
        p.disease_net = std::move(*models_.disease);
        p.disease_trigger = models_.disease_trigger;
        models_.detector.reset();
        models_.ripeness.reset();
        models_.disease.reset();
        p.validate();
        pipeline_ = std::move(p);
    }
}

const cascade::CascadeModel* Service::detector() const {
    if (pipeline_) return &pipeline_->detector;
    return models_.detector ? &*models_.detector : nullptr;
}

const nn::Network* Service::net(const std::string& which) const {
    if (pipeline_) return which == "ripeness" ? &pipeline_->ripeness_net : &pipeline_->disease_net;
    const auto& n = which == "ripeness" ? models_.ripeness : models_.disease;
    return n ? &*n : nullptr;
}

Response Service::upload(std::string_view body) {
    if (body.size() > config_.max_upload_bytes) {
        return error_response(413, "upload of " + std::to_string(body.size()) + " bytes exceeds the " +
                                       std::to_string(config_.max_upload_bytes) + " byte limit");
    }
    if (body.empty()) return error_response(415, "empty body, expected a PNG image");
    try {
        const auto* p = reinterpret_cast<const std::uint8_t*>(body.data());
        (void)imaging::decode_image(std::span<const std::uint8_t>(p, body.size()), imaging::ImageFormat::Png);
    } catch (const Error& e) {
        return error_response(415, std::string("not a decodable PNG: ") + e.what());
    }
    try {
        return json_response(200, {{"image_id", store_.put(body)}});
    } catch (const std::exception& e) {
        return error_response(500, e.what());
    }
}

Response Service::image(const std::string& id) const {
    const auto bytes = store_.get(id);
    if (!bytes) return error_response(404, "unknown image id");
    return {200, "image/png", std::string(bytes->begin(), bytes->end())};
}

namespace {

// Resolves "image_id" from a request object into a decoded image or an error.
struct Loaded {
    std::optional<imaging::Image> image;
    std::optional<Response> error;
};

Loaded load_request_image(const ImageStore& store, const nlohmann::json& req) {
    if (!req.contains("image_id") || !req["image_id"].is_string()) {
        return {std::nullopt, error_response(400, "missing string field image_id")};
    }
    const auto bytes = store.get(req["image_id"].get<std::string>());
    if (!bytes) return {std::nullopt, error_response(404, "unknown image id")};
    try {
        return {imaging::decode_image(*bytes), std::nullopt};
    } catch (const Error& e) {
        return {std::nullopt, error_response(500, std::string("stored image unreadable: ") + e.what())};
    }
}

nlohmann::json detection_json(const cascade::Detection& d) {
    return {{"box", pipeline::box_json(d.box)}, {"score", d.score}};
}

}  // namespace

Response Service::detect(std::string_view body) const {
    const auto req = parse_body(body);
    if (!req) return error_response(400, "body must be a JSON object");
    auto loaded = load_request_image(store_, *req);
    if (loaded.error) return *loaded.error;
    const auto* det = detector();
    if (!det) return error_response(503, "no detector loaded");
    try {
        auto boxes = nlohmann::json::array();
        for (const auto& d : cascade::detect(*det, *loaded.image, config_.scan)) {
            boxes.push_back(detection_json(d));
        }
        return json_response(200, {{"boxes", std::move(boxes)}});
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::ImageSmallerThanWindow) return error_response(400, e.what());
        return error_response(500, e.what());
    }
}

Response Service::classify(std::string_view body) const {
    const auto req = parse_body(body);
    if (!req) return error_response(400, "body must be a JSON object");
    const std::string which = req->value("model", std::string("ripeness"));
    if (which != "ripeness" && which != "disease") {
        return error_response(400, "model must be \"ripeness\" or \"disease\"");
    }
    auto loaded = load_request_image(store_, *req);
    if (loaded.error) return *loaded.error;
    const imaging::Image& img = *loaded.image;
    imaging::BBox box{0, 0, static_cast<double>(img.width()), static_cast<double>(img.height())};
    if (req->contains("box") && !(*req)["box"].is_null()) {
        try {
            box = pipeline::box_from_json((*req)["box"]);
        } catch (const Error& e) {
            return error_response(400, e.what());
        }
        const bool inside = std::isfinite(box.x) && std::isfinite(box.y) && box.w > 0 && box.h > 0 && box.x >= 0 &&
                            box.y >= 0 && box.right() <= img.width() && box.bottom() <= img.height();
        if (!inside) return error_response(400, "box must have positive size and lie inside the image");
    }
    const auto* model = net(which);
    if (!model) return error_response(503, "no " + which + " model loaded");
    try {
        const auto p = pipeline::classify_crop(*model, img, box, config_.crop_padding);
        return json_response(200, pipeline::prediction_json(p, model->class_names()));
    } catch (const Error& e) {
        return error_response(500, e.what());
    }
}

Response Service::grade(std::string_view body) const {
    const auto req = parse_body(body);
    if (!req) return error_response(400, "body must be a JSON object");
    auto loaded = load_request_image(store_, *req);
    if (loaded.error) return *loaded.error;
    if (!pipeline_) return error_response(503, "grading needs detector, ripeness and disease models");
    const auto force = req->find("force_disease");
    if (force != req->end() && !force->is_boolean()) return error_response(400, "force_disease must be a boolean");
    pipeline::GradeOptions opt;
    opt.force_disease = force != req->end() && force->get<bool>();
    opt.scan = config_.scan;
    opt.crop_padding = config_.crop_padding;
    try {
        auto detections = nlohmann::json::array();
        for (const auto& r : pipeline::grade_image(*pipeline_, *loaded.image, opt)) {
            detections.push_back(pipeline::report_json(r, *pipeline_));
        }
        return json_response(200, {{"image_id", (*req)["image_id"]}, {"detections", std::move(detections)}});
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::ImageSmallerThanWindow) return error_response(400, e.what());
        return error_response(500, e.what());
    }
}

Response Service::models() const {
    const auto& trigger = pipeline_ ? pipeline_->disease_trigger : models_.disease_trigger;
    nlohmann::json j{{"source", models_.source}, {"disease_trigger", trigger}};
    if (const auto* d = detector()) {
        j["detector"] = {{"window", {d->window_w, d->window_h}},
                         {"stages", d->stages.size()},
                         {"features", d->feature_pool.size()}};
    } else {
        j["detector"] = nullptr;
    }
    for (const char* which : {"ripeness", "disease"}) {
        const auto* n = net(which);
        j[which] = n ? arch_info(*n) : nlohmann::json(nullptr);
    }
    j["scan"] = {{"scale_factor", config_.scan.scale_factor},
                 {"stride", config_.scan.stride},
                 {"nms_iou", config_.scan.nms_iou},
                 {"min_neighbors", config_.scan.min_neighbors}};
    j["crop_padding"] = config_.crop_padding;
    return json_response(200, j);
}

}  // namespace fruitgrader::service
