#ifndef VCL_IDX_HPP
#define VCL_IDX_HPP

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "vcl/matrix.hpp"

namespace vcl {

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One split of MNIST as parsed from IDX files: N x 784 pixels in [0,1]
// plus the digit labels.
struct RawDataset {
    Matrix images;                 // N x 784
    std::vector<std::uint8_t> labels;  // each in 0..9
};

namespace detail {

inline bool is_gzip(const std::vector<std::uint8_t>& bytes) {
    return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

inline std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& in) {
    z_stream zs{};
    if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK)
        throw ParseError("gzip: inflateInit failed");
    std::vector<std::uint8_t> out;
    std::uint8_t buf[1 << 16];
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    int ret = Z_OK;
    do {
        zs.next_out = buf;
        zs.avail_out = sizeof(buf);
        ret = inflate(&zs, Z_NO_FLUSH);
        if (ret != Z_OK && ret != Z_STREAM_END) {
            inflateEnd(&zs);
            throw ParseError("gzip: corrupt stream (zlib code " + std::to_string(ret) + ")");
        }
        out.insert(out.end(), buf, buf + (sizeof(buf) - zs.avail_out));
    } while (ret != Z_STREAM_END);
    inflateEnd(&zs);
    return out;
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
    if (off + 4 > b.size())
        throw ParseError("IDX: truncated header at offset " + std::to_string(off));
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
           (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

}  // namespace detail

// IDX3 ubyte image stream (optionally gzipped): magic 2051, dims N x 28 x 28.
// Pixels scaled to [0,1] by dividing by 255.
inline Matrix parse_idx_images(std::vector<std::uint8_t> bytes) {
    if (detail::is_gzip(bytes)) bytes = detail::gunzip(bytes);
    const std::uint32_t magic = detail::read_be32(bytes, 0);
    if (magic != 2051)
        throw ParseError("IDX images: magic " + std::to_string(magic) + " at offset 0, expected 2051");
    const std::uint32_t n = detail::read_be32(bytes, 4);
    const std::uint32_t h = detail::read_be32(bytes, 8);
    const std::uint32_t w = detail::read_be32(bytes, 12);
    if (h != 28 || w != 28)
        throw ParseError("IDX images: dims " + std::to_string(h) + "x" + std::to_string(w) +
                         " at offset 8, expected 28x28");
    const std::size_t need = 16 + std::size_t(n) * 784;
    if (bytes.size() < need)
        throw ParseError("IDX images: truncated payload, have " + std::to_string(bytes.size()) +
                         " bytes, need " + std::to_string(need));
    Matrix out(n, 784);
    for (std::size_t i = 0; i < std::size_t(n) * 784; ++i)
        out.data()[i] = bytes[16 + i] / 255.0;
    return out;
}

// IDX1 ubyte label stream (optionally gzipped): magic 2049, labels in 0..9.
inline std::vector<std::uint8_t> parse_idx_labels(std::vector<std::uint8_t> bytes) {
    if (detail::is_gzip(bytes)) bytes = detail::gunzip(bytes);
    const std::uint32_t magic = detail::read_be32(bytes, 0);
    if (magic != 2049)
        throw ParseError("IDX labels: magic " + std::to_string(magic) + " at offset 0, expected 2049");
    const std::uint32_t n = detail::read_be32(bytes, 4);
    if (bytes.size() < 8 + std::size_t(n))
        throw ParseError("IDX labels: truncated payload, have " + std::to_string(bytes.size()) +
                         " bytes, need " + std::to_string(8 + std::size_t(n)));
    std::vector<std::uint8_t> labels(bytes.begin() + 8, bytes.begin() + 8 + n);
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] > 9)
            throw ParseError("IDX labels: label " + std::to_string(labels[i]) + " at offset " +
                             std::to_string(8 + i) + " out of range 0..9");
    return labels;
}

// Inverse of the parsers, for round-trip checks and fixture generation.
inline std::vector<std::uint8_t> serialize_idx_images(const Matrix& images) {
    std::vector<std::uint8_t> out;
    out.reserve(16 + images.size());
    auto push_be32 = [&out](std::uint32_t v) {
        out.push_back(std::uint8_t(v >> 24));
        out.push_back(std::uint8_t(v >> 16));
        out.push_back(std::uint8_t(v >> 8));
        out.push_back(std::uint8_t(v));
    };
    push_be32(2051);
    push_be32(static_cast<std::uint32_t>(images.rows()));
    push_be32(28);
    push_be32(28);
    for (std::size_t i = 0; i < images.size(); ++i)
        out.push_back(static_cast<std::uint8_t>(std::lround(images.data()[i] * 255.0)));
    return out;
}

inline std::vector<std::uint8_t> serialize_idx_labels(const std::vector<std::uint8_t>& labels) {
    std::vector<std::uint8_t> out;
    auto push_be32 = [&out](std::uint32_t v) {
        out.push_back(std::uint8_t(v >> 24));
        out.push_back(std::uint8_t(v >> 16));
        out.push_back(std::uint8_t(v >> 8));
        out.push_back(std::uint8_t(v));
    };
    push_be32(2049);
    push_be32(static_cast<std::uint32_t>(labels.size()));
    out.insert(out.end(), labels.begin(), labels.end());
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open file: " + path);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f),
                                     std::istreambuf_iterator<char>());
}

// Loads a parsed split, trying `name` then `name.gz` under `dir`.
inline RawDataset load_raw_dataset(const std::string& dir, const std::string& images_name,
                                   const std::string& labels_name) {
    auto read_either = [&dir](const std::string& name) {
        std::ifstream probe(dir + "/" + name, std::ios::binary);
        if (probe) return read_file_bytes(dir + "/" + name);
        return read_file_bytes(dir + "/" + name + ".gz");
    };
    RawDataset raw;
    raw.images = parse_idx_images(read_either(images_name));
    raw.labels = parse_idx_labels(read_either(labels_name));
    if (raw.images.rows() != raw.labels.size())
        throw ParseError("IDX: image count " + std::to_string(raw.images.rows()) +
                         " != label count " + std::to_string(raw.labels.size()));
    return raw;
}

inline RawDataset load_mnist_train(const std::string& dir) {
    return load_raw_dataset(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte");
}

inline RawDataset load_mnist_test(const std::string& dir) {
    return load_raw_dataset(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");
}

}  // namespace vcl

#endif  // VCL_IDX_HPP
