#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gardlab {

// Dense row-major 2D tensor of doubles. Scalars are 1x1, row vectors 1xC.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
    Tensor(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != static_cast<size_t>(r) * c)
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    static Tensor scalar(double v) {
        Tensor t(1, 1);
        t.data[0] = v;
        return t;
    }

    double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    size_t size() const { return data.size(); }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
    bool is_scalar() const { return rows == 1 && cols == 1; }
    double item() const {
        if (!is_scalar()) throw std::logic_error("Tensor::item on non-scalar");
        return data[0];
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
    bool all_finite() const;
    std::string shape_str() const;
};

// splitmix64; used to derive independent seeds from (seed, tags...).
uint64_t mix64(uint64_t x);
uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0);

// Deterministic random stream. Avoids std::*_distribution so that results
// are identical across standard libraries.
class RandomStream {
  public:
    explicit RandomStream(uint64_t seed) : state_(mix64(seed ^ 0x9e3779b97f4a7c15ull)) {}

    uint64_t next_u64();
    // uniform in [0,1)
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // standard normal via Box-Muller (two uniforms per draw, no cached spare)
    double normal();
    int uniform_int(int n);  // in [0, n)

    Tensor normal_tensor(int rows, int cols, double stddev = 1.0);
    Tensor uniform_tensor(int rows, int cols, double lo, double hi);

  private:
    uint64_t state_;
};

}  // namespace gardlab
