#include "gardlab/checkpoint.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace gardlab {

namespace {

constexpr char kMagic[8] = {'G', 'R', 'D', 'L', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF64 = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

void write_string(std::ostream& os, const std::string& s) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
    uint32_t n = read_pod<uint32_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw std::runtime_error("checkpoint: truncated string");
    return s;
}

class Sha256 {
  public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
            throw std::runtime_error("sha256 init failed");
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    void update(const void* data, size_t n) {
        if (EVP_DigestUpdate(ctx_, data, n) != 1) throw std::runtime_error("sha256 update failed");
    }
    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx_, md, &len) != 1)
            throw std::runtime_error("sha256 final failed");
        static const char* digits = "0123456789abcdef";
        std::string out;
        out.reserve(2 * len);
        for (unsigned int i = 0; i < len; ++i) {
            out.push_back(digits[md[i] >> 4]);
            out.push_back(digits[md[i] & 0xf]);
        }
        return out;
    }

  private:
    EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(const void* data, size_t n) {
    Sha256 h;
    h.update(data, n);
    return h.hex();
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string params_digest(const nn::ParamSet& params) {
    return named_tensors_digest(params.named_values());
}

std::string named_tensors_digest(const NamedTensors& named) {
    NamedTensors sorted = named;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    Sha256 h;
    for (const auto& [name, t] : sorted) {
        h.update(name.data(), name.size());
        int32_t dims[2] = {t.rows, t.cols};
        h.update(dims, sizeof(dims));
        h.update(t.data.data(), t.data.size() * sizeof(double));
    }
    return h.hex();
}

void save_checkpoint(const std::string& path, const std::string& config_digest,
                     const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    os.write(kMagic, sizeof(kMagic));
    write_pod<uint32_t>(os, kVersion);
    write_string(os, config_digest);
    write_pod<uint64_t>(os, tensors.size());
    for (const auto& [name, t] : tensors) {
        write_string(os, name);
        write_pod<uint8_t>(os, kDtypeF64);
        write_pod<uint32_t>(os, 2);
        write_pod<uint64_t>(os, static_cast<uint64_t>(t.rows));
        write_pod<uint64_t>(os, static_cast<uint64_t>(t.cols));
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

NamedTensors load_checkpoint(const std::string& path, std::string* config_digest) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    uint32_t version = read_pod<uint32_t>(is);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    std::string digest = read_string(is);
    if (config_digest) *config_digest = digest;
    uint64_t count = read_pod<uint64_t>(is);
    NamedTensors out;
    out.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        std::string name = read_string(is);
        uint8_t dtype = read_pod<uint8_t>(is);
        if (dtype != kDtypeF64) throw std::runtime_error("checkpoint: unsupported dtype");
        uint32_t rank = read_pod<uint32_t>(is);
        if (rank != 2) throw std::runtime_error("checkpoint: unsupported rank");
        uint64_t rows = read_pod<uint64_t>(is);
        uint64_t cols = read_pod<uint64_t>(is);
        Tensor t(static_cast<int>(rows), static_cast<int>(cols));
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated payload for " + name);
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

std::string file_sha256(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("file_sha256: cannot open: " + path);
    Sha256 h;
    char buf[65536];
    while (is) {
        is.read(buf, sizeof(buf));
        std::streamsize n = is.gcount();
        if (n > 0) h.update(buf, static_cast<size_t>(n));
    }
    return h.hex();
}

}  // namespace gardlab
