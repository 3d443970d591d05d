#include "fruitgrader/pipeline.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "fruitgrader/error.hpp"

namespace fruitgrader::pipeline {
namespace {

using nn::Tensor;
using nn::shape_string;

constexpr std::size_t kHeaderSize = sizeof(kContainerMagic) + 8;
constexpr std::size_t kTrailerSize = 4;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    std::size_t done = 0;
    while (done < bytes.size()) {
        const std::size_t n = std::min<std::size_t>(bytes.size() - done, 1u << 30);
        crc = crc32(crc, bytes.data() + done, static_cast<uInt>(n));
        done += n;
    }
    return static_cast<std::uint32_t>(crc);
}

constexpr const char* kFields[] = {"weight", "bias", "gamma", "beta", "running_mean", "running_var"};

std::array<Tensor*, 6> fields_of(nn::LayerParams<float>& p) {
    return {&p.weight, &p.bias, &p.gamma, &p.beta, &p.running_mean, &p.running_var};
}

std::array<const Tensor*, 6> fields_of(const nn::LayerParams<float>& p) {
    return {&p.weight, &p.bias, &p.gamma, &p.beta, &p.running_mean, &p.running_var};
}

// Appends the network's tensors to the blob and returns its manifest entry.
nlohmann::json pack_network(const nn::Network& net, std::vector<std::uint8_t>& blob) {
    nlohmann::json tensors = nlohmann::json::array();
    const auto& layers = net.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto fields = fields_of(layers[i]);
        for (std::size_t f = 0; f < fields.size(); ++f) {
            const Tensor& t = *fields[f];
            if (t.empty()) continue;
            tensors.push_back({{"layer", i}, {"field", kFields[f]}, {"shape", t.shape()}, {"offset", blob.size()}});
            for (float v : t.data()) put_u32(blob, std::bit_cast<std::uint32_t>(v));
        }
    }
    return {{"architecture", net.spec()}, {"class_names", net.class_names()}, {"tensors", std::move(tensors)}};
}

nn::Network unpack_network(const nlohmann::json& entry, std::span<const std::uint8_t> blob) {
    nn::Network net(entry.at("architecture").get<nn::ArchitectureSpec>(), 0);
    net.set_class_names(entry.at("class_names").get<std::vector<std::string>>());
    auto& layers = net.layers();
    std::vector<std::array<bool, 6>> seen(layers.size());
    for (const auto& t : entry.at("tensors")) {
        const auto layer = t.at("layer").get<std::size_t>();
        const auto field = t.at("field").get<std::string>();
        const auto shape = t.at("shape").get<std::vector<int>>();
        const auto offset = t.at("offset").get<std::size_t>();
        if (layer >= layers.size()) throw Error(ErrorKind::MalformedFile, "tensor layer index out of range");
        const auto* it = std::find_if(std::begin(kFields), std::end(kFields), [&](const char* n) { return field == n; });
        if (it == std::end(kFields)) throw Error(ErrorKind::MalformedFile, "unknown tensor field '" + field + "'");
        const auto f = static_cast<std::size_t>(it - std::begin(kFields));
        Tensor& dst = *fields_of(layers[layer])[f];
        if (dst.shape() != shape) {
            throw Error(ErrorKind::MalformedFile, "tensor " + std::to_string(layer) + "." + field + " has shape " +
                                                      shape_string(shape) + ", architecture expects " +
                                                      shape_string(dst.shape()));
        }
        const std::size_t bytes = dst.size() * 4;
        if (offset > blob.size() || blob.size() - offset < bytes) {
            throw Error(ErrorKind::MalformedFile, "tensor data past the end of the container");
        }
        auto out = dst.data();
        for (std::size_t k = 0; k < out.size(); ++k) {
            out[k] = std::bit_cast<float>(get_u32(blob.data() + offset + 4 * k));
        }
        seen[layer][f] = true;
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto fields = fields_of(layers[i]);
        for (std::size_t f = 0; f < fields.size(); ++f) {
            if (!fields[f]->empty() && !seen[i][f]) {
                throw Error(ErrorKind::MalformedFile, "missing tensor " + std::to_string(i) + "." + kFields[f]);
            }
        }
    }
    return net;
}

std::vector<std::uint8_t> assemble(const nlohmann::json& manifest, const std::vector<std::uint8_t>& blob) {
    const std::string text = manifest.dump();
    std::vector<std::uint8_t> out(kContainerMagic, kContainerMagic + sizeof(kContainerMagic));
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), blob.begin(), blob.end());
    put_u32(out, crc_of(out));
    return out;
}

struct Opened {
    nlohmann::json manifest;
    std::span<const std::uint8_t> blob;
};

Opened open_container(std::span<const std::uint8_t> bytes, const std::string& expected_kind) {
    if (bytes.size() < kHeaderSize + kTrailerSize) {
        throw Error(ErrorKind::CorruptContainer, "container is " + std::to_string(bytes.size()) + " bytes, too short");
    }
    if (!std::equal(std::begin(kContainerMagic), std::end(kContainerMagic), bytes.begin())) {
        throw Error(ErrorKind::CorruptContainer, "bad magic, not an FGPM0001 container");
    }
    const std::size_t body = bytes.size() - kTrailerSize;
    const std::uint32_t stored = get_u32(bytes.data() + body);
    const std::uint32_t actual = crc_of(bytes.first(body));
    if (stored != actual) throw Error(ErrorKind::CorruptContainer, "checksum mismatch");
    const std::uint64_t len = get_u64(bytes.data() + sizeof(kContainerMagic));
    if (len > body - kHeaderSize) throw Error(ErrorKind::CorruptContainer, "manifest length past the end");

    Opened o;
    try {
        o.manifest = nlohmann::json::parse(bytes.begin() + kHeaderSize, bytes.begin() + kHeaderSize + len);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedFile, std::string("manifest: ") + e.what());
    }
    const int version = o.manifest.value("version", -1);
    if (version != kPipelineVersion) {
        throw Error(ErrorKind::VersionMismatch, "container version " + std::to_string(version) +
                                                    ", this build reads version " + std::to_string(kPipelineVersion));
    }
    if (o.manifest.value("kind", "") != expected_kind) {
        throw Error(ErrorKind::MalformedFile,
                    "container holds a '" + o.manifest.value("kind", "") + "', expected '" + expected_kind + "'");
    }
    o.blob = bytes.subspan(kHeaderSize + len, body - kHeaderSize - len);
    return o;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::MalformedFile, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::InvalidArgument, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error(ErrorKind::InvalidArgument, "write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace

std::vector<std::string> ripeness_labels() { return {"bad mango", "raw mango", "ripe mango"}; }

std::vector<std::string> disease_labels() {
    return {"alternaria", "anthracnose", "black mold rot", "healthy", "stem end rot"};
}

void PipelineModel::validate() const {
    if (ripeness_net.num_classes() != 3) {
        throw Error(ErrorKind::InvalidArgument,
                    "ripeness network has " + std::to_string(ripeness_net.num_classes()) + " outputs, expected 3");
    }
    if (disease_net.num_classes() != 5) {
        throw Error(ErrorKind::InvalidArgument,
                    "disease network has " + std::to_string(disease_net.num_classes()) + " outputs, expected 5");
    }
    const auto& names = ripeness_net.class_names();
    for (const auto& t : disease_trigger) {
        if (std::find(names.begin(), names.end(), t) == names.end()) {
            throw Error(ErrorKind::InvalidArgument, "disease trigger '" + t + "' is not a ripeness label");
        }
    }
    if (detector.stages.empty()) throw Error(ErrorKind::InvalidArgument, "detector has no stages");
}

BBox padded_box(const BBox& box, int image_w, int image_h, double padding) {
    const double x0 = std::clamp(box.x - padding * box.w, 0.0, static_cast<double>(image_w));
    const double y0 = std::clamp(box.y - padding * box.h, 0.0, static_cast<double>(image_h));
    const double x1 = std::clamp(box.right() + padding * box.w, 0.0, static_cast<double>(image_w));
    const double y1 = std::clamp(box.bottom() + padding * box.h, 0.0, static_cast<double>(image_h));
    return {x0, y0, x1 - x0, y1 - y0};
}

nn::Prediction classify_crop(const nn::Network& net, const Image& image, const BBox& box, double padding) {
    return nn::predict(net, imaging::crop(image, padded_box(box, image.width(), image.height(), padding)));
}

std::vector<FruitReport> classify_detections(const PipelineModel& model, const Image& image,
                                             const std::vector<cascade::Detection>& detections,
                                             const GradeOptions& options) {
    std::vector<FruitReport> reports(detections.size());
    const long n = static_cast<long>(detections.size());
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < n; ++i) {
        FruitReport& r = reports[i];
        r.box = detections[i].box;
        r.detection_score = detections[i].score;
        r.ripeness = classify_crop(model.ripeness_net, image, r.box, options.crop_padding);
        const bool triggered = std::find(model.disease_trigger.begin(), model.disease_trigger.end(),
                                         r.ripeness.label) != model.disease_trigger.end();
        if (options.force_disease || triggered) {
            r.disease = classify_crop(model.disease_net, image, r.box, options.crop_padding);
        }
    }
    return reports;
}

std::vector<FruitReport> grade_image(const PipelineModel& model, const Image& image, const GradeOptions& options) {
    return classify_detections(model, image, cascade::detect(model.detector, image, options.scan), options);
}

nlohmann::json prediction_json(const nn::Prediction& p, const std::vector<std::string>& labels) {
    nlohmann::json probs = nlohmann::json::object();
    for (std::size_t k = 0; k < p.probs.size(); ++k) probs[labels.at(k)] = p.probs[k];
    return {{"label", p.label}, {"probs", std::move(probs)}};
}

nn::Prediction prediction_from_json(const nlohmann::json& j, const std::vector<std::string>& labels) {
    try {
        nn::Prediction p;
        p.label = j.at("label").get<std::string>();
        const auto& probs = j.at("probs");
        if (probs.size() != labels.size()) throw Error(ErrorKind::MalformedFile, "probability count mismatch");
        for (const auto& l : labels) p.probs.push_back(probs.at(l).get<double>());
        const auto it = std::find(labels.begin(), labels.end(), p.label);
        if (it == labels.end()) throw Error(ErrorKind::MalformedFile, "unknown label '" + p.label + "'");
        p.index = static_cast<int>(it - labels.begin());
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedFile, std::string("prediction json: ") + e.what());
    }
}

nlohmann::json box_json(const BBox& b) { return {{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}}; }

BBox box_from_json(const nlohmann::json& j) {
    try {
        return {j.at("x").get<double>(), j.at("y").get<double>(), j.at("w").get<double>(), j.at("h").get<double>()};
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedFile, std::string("box json: ") + e.what());
    }
}

nlohmann::json report_json(const FruitReport& r, const PipelineModel& model) {
    nlohmann::json j{{"box", box_json(r.box)},
                     {"score", r.detection_score},
                     {"ripeness", prediction_json(r.ripeness, model.ripeness_net.class_names())}};
    if (r.disease) j["disease"] = prediction_json(*r.disease, model.disease_net.class_names());
    return j;
}

FruitReport report_from_json(const nlohmann::json& j, const PipelineModel& model) {
    FruitReport r;
    r.box = box_from_json(j.at("box"));
    r.detection_score = j.at("score").get<double>();
    r.ripeness = prediction_from_json(j.at("ripeness"), model.ripeness_net.class_names());
    if (j.contains("disease")) r.disease = prediction_from_json(j.at("disease"), model.disease_net.class_names());
    return r;
}

std::vector<std::uint8_t> serialize_pipeline(const PipelineModel& model) {
    model.validate();
    std::vector<std::uint8_t> blob;
    nlohmann::json manifest{{"version", model.version}, {"kind", "pipeline"}};
    manifest["networks"]["ripeness"] = pack_network(model.ripeness_net, blob);
    manifest["networks"]["disease"] = pack_network(model.disease_net, blob);
    manifest["detector"] = model.detector;
    manifest["disease_trigger"] = model.disease_trigger;
    return assemble(manifest, blob);
}

PipelineModel deserialize_pipeline(std::span<const std::uint8_t> bytes) {
    const Opened o = open_container(bytes, "pipeline");
    PipelineModel model;
    try {
        model.ripeness_net = unpack_network(o.manifest.at("networks").at("ripeness"), o.blob);
        model.disease_net = unpack_network(o.manifest.at("networks").at("disease"), o.blob);
        model.detector = o.manifest.at("detector").get<cascade::CascadeModel>();
        model.disease_trigger = o.manifest.at("disease_trigger").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedFile, std::string("manifest: ") + e.what());
    }
    model.validate();
    return model;
}

void save_pipeline(const PipelineModel& model, const std::filesystem::path& path) {
    write_file(serialize_pipeline(model), path);
}

PipelineModel load_pipeline(const std::filesystem::path& path) { return deserialize_pipeline(read_file(path)); }

std::vector<std::uint8_t> serialize_network(const nn::Network& net) {
    std::vector<std::uint8_t> blob;
    nlohmann::json manifest{{"version", kPipelineVersion}, {"kind", "network"}};
    manifest["networks"]["network"] = pack_network(net, blob);
    return assemble(manifest, blob);
}

nn::Network deserialize_network(std::span<const std::uint8_t> bytes) {
    const Opened o = open_container(bytes, "network");
    try {
        return unpack_network(o.manifest.at("networks").at("network"), o.blob);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedFile, std::string("manifest: ") + e.what());
    }
}

void save_network(const nn::Network& net, const std::filesystem::path& path) {
    write_file(serialize_network(net), path);
}

nn::Network load_network(const std::filesystem::path& path) { return deserialize_network(read_file(path)); }

}  // namespace fruitgrader::pipeline
