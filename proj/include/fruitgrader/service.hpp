#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fruitgrader/pipeline.hpp"

namespace fruitgrader::service {

inline constexpr std::size_t kDefaultMaxUpload = 16u * 1024u * 1024u;

/// Models held by a running service. Any part may be missing; endpoints
/// that need a missing part answer 503.
struct LoadedModels {
    std::optional<cascade::CascadeModel> detector;
    std::optional<nn::Network> ripeness;
    std::optional<nn::Network> disease;
    std::vector<std::string> disease_trigger{"bad mango"};
    std::string source;  // where they were loaded from

    static LoadedModels from_pipeline(pipeline::PipelineModel model, std::string source = {});
    bool complete() const noexcept { return detector && ripeness && disease; }
};

/// `pipeline.fgpm` when present, otherwise any of `detector.json`,
/// `ripeness.fgpm`, `disease.fgpm`. A missing directory loads nothing.
LoadedModels load_models_dir(const std::filesystem::path& dir);

/// Content-addressed PNG files named by the SHA-256 of their bytes.
class ImageStore {
public:
    explicit ImageStore(std::filesystem::path dir);
    const std::filesystem::path& dir() const noexcept { return dir_; }

    /// Writes through a temporary file and a rename, so concurrent writers
    /// of the same bytes are harmless. Returns the id.
    std::string put(std::string_view bytes);
    std::optional<std::vector<std::uint8_t>> get(const std::string& id) const;
    bool contains(const std::string& id) const;
    /// Removes files older than max_age (by modification time). Returns the count.
    std::size_t prune(std::chrono::seconds max_age);

    static bool valid_id(std::string_view id) noexcept;

private:
    std::filesystem::path path_of(const std::string& id) const;
    std::filesystem::path dir_;
};

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);

struct Response {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;

    nlohmann::json json() const { return nlohmann::json::parse(body); }
};

struct ServiceConfig {
    std::filesystem::path image_dir = "images";
    std::size_t max_upload_bytes = kDefaultMaxUpload;
    cascade::ScanOptions scan;
    double crop_padding = 0.1;
};

/// The HTTP API without the transport. Handlers take the raw request body
/// and never throw; errors become JSON {"error": ...} with a status code.
/// Safe for concurrent callers.
class Service {
public:
    Service(ServiceConfig config, LoadedModels models);

    Response upload(std::string_view body);
    Response image(const std::string& id) const;
    Response detect(std::string_view body) const;
    Response classify(std::string_view body) const;
    Response grade(std::string_view body) const;
    Response models() const;

    const ServiceConfig& config() const noexcept { return config_; }

private:
    const cascade::CascadeModel* detector() const;
    const nn::Network* net(const std::string& which) const;

    ServiceConfig config_;
    LoadedModels models_;                              // parts, when incomplete
    std::optional<pipeline::PipelineModel> pipeline_;  // when complete
    ImageStore store_;
};

}  // namespace fruitgrader::service
