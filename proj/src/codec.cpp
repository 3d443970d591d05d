#include "fruitgrader/codec.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include "fruitgrader/error.hpp"

namespace fruitgrader::imaging {
namespace {

constexpr std::uint8_t kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

Image decode_png(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSignature, 8) != 0) {
        throw Error(ErrorKind::MalformedFile, "missing PNG signature");
    }
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
        std::string msg = image.message;
        png_image_free(&image);
        throw Error(ErrorKind::MalformedFile, "PNG header: " + msg);
    }
    if (image.format & PNG_FORMAT_FLAG_LINEAR) {
        png_image_free(&image);
        throw Error(ErrorKind::UnsupportedFormat, "16-bit PNG samples are not supported");
    }
    const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
    image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    const int channels = color ? 3 : 1;
    std::vector<std::uint8_t> raw(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, raw.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw Error(ErrorKind::MalformedFile, "PNG body: " + msg);
    }
    std::vector<float> data(raw.size());
    std::transform(raw.begin(), raw.end(), data.begin(), [](std::uint8_t v) { return v / 255.0f; });
    return Image(static_cast<int>(image.width), static_cast<int>(image.height), channels, std::move(data));
}

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string ppm_token(std::span<const std::uint8_t> bytes, std::size_t& pos) {
    while (pos < bytes.size()) {
        if (bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (std::isspace(bytes[pos])) {
            ++pos;
        } else {
            break;
        }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    return tok;
}

int ppm_int(std::span<const std::uint8_t> bytes, std::size_t& pos) {
    const std::string tok = ppm_token(bytes, pos);
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(c); }) ||
        tok.size() > 9) {
        throw Error(ErrorKind::MalformedFile, "bad PPM header field '" + tok + "'");
    }
    return std::stoi(tok);
}

Image decode_ppm(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    const std::string magic = ppm_token(bytes, pos);
    if (magic != "P6") {
        if (magic == "P3" || magic == "P5" || magic == "P2") {
            throw Error(ErrorKind::UnsupportedFormat, "only binary RGB PPM (P6) is supported, got " + magic);
        }
        throw Error(ErrorKind::MalformedFile, "missing P6 magic");
    }
    const int w = ppm_int(bytes, pos);
    const int h = ppm_int(bytes, pos);
    const int maxval = ppm_int(bytes, pos);
    if (w <= 0 || h <= 0) throw Error(ErrorKind::MalformedFile, "PPM dimensions must be positive");
    if (maxval != 255) {
        throw Error(ErrorKind::UnsupportedFormat, "PPM maxval " + std::to_string(maxval) + " (only 255)");
    }
    ++pos;  // single whitespace byte before the raster
    const std::size_t need = static_cast<std::size_t>(w) * h * 3;
    if (pos > bytes.size() || bytes.size() - pos < need) {
        throw Error(ErrorKind::MalformedFile, "truncated PPM raster");
    }
    std::vector<float> data(need);
    for (std::size_t i = 0; i < need; ++i) data[i] = bytes[pos + i] / 255.0f;
    return Image(w, h, 3, std::move(data));
}

std::uint8_t quantize(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

Image decode_image(std::span<const std::uint8_t> bytes, ImageFormat format) {
    switch (format) {
        case ImageFormat::Png: return decode_png(bytes);
        case ImageFormat::Ppm: return decode_ppm(bytes);
    }
    throw Error(ErrorKind::UnsupportedFormat, "unknown format");
}

Image decode_image(std::span<const std::uint8_t> bytes) {
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSignature, 8) == 0) return decode_png(bytes);
    if (bytes.size() >= 2 && bytes[0] == 'P') return decode_ppm(bytes);
    throw Error(ErrorKind::UnsupportedFormat, "unrecognized image signature");
}

std::vector<std::uint8_t> encode_png(const Image& img) {
    if (img.empty()) throw Error(ErrorKind::ZeroDimension, "cannot encode an empty image");
    std::vector<std::uint8_t> raw(img.size());
    std::transform(img.data().begin(), img.data().end(), raw.begin(), quantize);

    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width());
    image.height = static_cast<png_uint_32>(img.height());
    image.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;

    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, raw.data(), 0, nullptr)) {
        throw Error(ErrorKind::MalformedFile, std::string("PNG encode: ") + image.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, raw.data(), 0, nullptr)) {
        throw Error(ErrorKind::MalformedFile, std::string("PNG encode: ") + image.message);
    }
    out.resize(size);
    return out;
}

std::vector<std::uint8_t> encode_ppm(const Image& img) {
    const Image rgb = img.channels() == 3 ? img : [&] {
        Image c(img.width(), img.height(), 3);
        for (int y = 0; y < img.height(); ++y)
            for (int x = 0; x < img.width(); ++x)
                for (int k = 0; k < 3; ++k) c.at(x, y, k) = img.at(x, y);
        return c;
    }();
    const std::string header = "P6\n" + std::to_string(rgb.width()) + " " + std::to_string(rgb.height()) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + rgb.size());
    for (float v : rgb.data()) out.push_back(quantize(v));
    return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::MalformedFile, "cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::InvalidArgument, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::InvalidArgument, "short write to " + path.string());
}

Image load_image(const std::filesystem::path& path) {
    return decode_image(read_file_bytes(path));
}

void save_png(const Image& img, const std::filesystem::path& path) {
    write_file_bytes(path, encode_png(img));
}

bool probe_image(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = read_file_bytes(path);
    } catch (const Error&) {
        return false;
    }
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSignature, 8) == 0) {
        png_image image;
        std::memset(&image, 0, sizeof(image));
        image.version = PNG_IMAGE_VERSION;
        const bool ok = png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()) &&
                        !(image.format & PNG_FORMAT_FLAG_LINEAR);
        png_image_free(&image);
        return ok;
    }
    try {
        decode_ppm(bytes);
        return true;
    } catch (const Error&) {
        return false;
    }
}

bool is_image_path(const std::filesystem::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".ppm";
}

}  // namespace fruitgrader::imaging
