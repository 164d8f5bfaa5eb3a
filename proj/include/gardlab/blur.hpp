#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "gardlab/geometry.hpp"

namespace gardlab {

enum class BlurSeverity { kMild, kModerate, kHeavy };

BlurSeverity blur_severity_from_string(const std::string& s);
std::string to_string(BlurSeverity s);

struct BlurSpec {
    int k = 1;  // odd kernel size
    std::vector<double> kernel;  // k*k, non-negative, sums to 1
    BlurSeverity severity = BlurSeverity::kMild;
    uint64_t seed = 0;

    double at(int y, int x) const { return kernel[static_cast<size_t>(y) * k + x]; }
    double sum() const;
};

// Samples a camera-shake trajectory (random walk with momentum and jitter)
// and rasterizes it with sub-pixel anti-aliasing. Severity sets kernel size
// and trajectory length: mild (7, 0.3k), moderate (13, 0.6k), heavy (21, 0.9k).
BlurSpec make_blur_kernel(BlurSeverity severity, uint64_t seed);

// Splats a polyline onto a k x k grid with bilinear anti-aliasing and unit
// normalization. A single point (or zero-length path) yields a delta kernel.
std::vector<double> rasterize_trajectory(const std::vector<Eigen::Vector2d>& points, int k);

// 2D convolution with reflect padding; output clamped to [0,1].
// Throws if the kernel is larger than the image.
Image apply_blur(const Image& image, const BlurSpec& spec);

// Mass-weighted RMS radius of the kernel around its centroid.
double kernel_support_radius(const BlurSpec& spec);

// Plain-text kernel dump (row-major grid) for golden-file comparisons.
std::string dump_kernel(const BlurSpec& spec);

}  // namespace gardlab
