#include "gardlab/blur.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "gardlab/tensor.hpp"

namespace gardlab {

BlurSeverity blur_severity_from_string(const std::string& s) {
    if (s == "mild") return BlurSeverity::kMild;
    if (s == "moderate") return BlurSeverity::kModerate;
    if (s == "heavy") return BlurSeverity::kHeavy;
    throw std::invalid_argument("unknown blur severity: " + s);
}

std::string to_string(BlurSeverity s) {
    switch (s) {
        case BlurSeverity::kMild: return "mild";
        case BlurSeverity::kModerate: return "moderate";
        case BlurSeverity::kHeavy: return "heavy";
    }
    return "?";
}

double BlurSpec::sum() const {
    double s = 0.0;
    for (double v : kernel) s += v;
    return s;
}

std::vector<double> rasterize_trajectory(const std::vector<Eigen::Vector2d>& points, int k) {
    if (k < 1 || k % 2 == 0) throw std::invalid_argument("rasterize_trajectory: k must be odd");
    if (points.empty()) throw std::invalid_argument("rasterize_trajectory: empty trajectory");
    std::vector<double> grid(static_cast<size_t>(k) * k, 0.0);
    const double c = (k - 1) / 2.0;

    // center on the centroid, shrink to fit the grid if needed
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (const auto& p : points) mean += p;
    mean /= static_cast<double>(points.size());
    double max_r = 0.0;
    for (const auto& p : points) max_r = std::max(max_r, (p - mean).lpNorm<Eigen::Infinity>());
    double fit = max_r > c ? c / max_r : 1.0;

    auto splat = [&](const Eigen::Vector2d& p, double w) {
        double gx = c + (p.x() - mean.x()) * fit;
        double gy = c + (p.y() - mean.y()) * fit;
        int x0 = static_cast<int>(std::floor(gx));
        int y0 = static_cast<int>(std::floor(gy));
        double fx = gx - x0, fy = gy - y0;
        for (int dy = 0; dy <= 1; ++dy) {
            for (int dx = 0; dx <= 1; ++dx) {
                int x = x0 + dx, y = y0 + dy;
                if (x < 0 || x >= k || y < 0 || y >= k) continue;
                double wt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
                grid[static_cast<size_t>(y) * k + x] += w * wt;
            }
        }
    };

    double total_len = 0.0;
    for (size_t i = 1; i < points.size(); ++i) total_len += (points[i] - points[i - 1]).norm();

    if (total_len < 1e-9) {
        splat(points.front(), 1.0);
    } else {
        constexpr double kStep = 0.05;
        for (size_t i = 1; i < points.size(); ++i) {
            Eigen::Vector2d a = points[i - 1], b = points[i];
            double len = (b - a).norm();
            int n = std::max(1, static_cast<int>(std::ceil(len / kStep)));
            double w = len / n;
            for (int j = 0; j < n; ++j) {
                double t = (j + 0.5) / n;
                splat(a + t * (b - a), w);
            }
        }
    }

    double s = 0.0;
    for (double v : grid) s += v;
    if (s <= 0.0) {  // all mass clipped; fall back to a delta
        grid.assign(grid.size(), 0.0);
        grid[static_cast<size_t>(k / 2) * k + k / 2] = 1.0;
        s = 1.0;
    }
    for (double& v : grid) v /= s;
    return grid;
}

BlurSpec make_blur_kernel(BlurSeverity severity, uint64_t seed) {
    int k = 7;
    double len_factor = 0.3, jitter = 0.22;
    switch (severity) {
        case BlurSeverity::kMild: k = 7; len_factor = 0.3; jitter = 0.22; break;
        case BlurSeverity::kModerate: k = 13; len_factor = 0.6; jitter = 0.38; break;
        case BlurSeverity::kHeavy: k = 21; len_factor = 0.9; jitter = 0.55; break;
    }
    const double target_len = len_factor * k;

    RandomStream rng(derive_seed(seed, 0xb1u, static_cast<uint64_t>(k)));
    const double step = 0.3;
    const double momentum = 0.85;
    double ang = rng.uniform(0.0, 2.0 * M_PI);
    Eigen::Vector2d v(step * std::cos(ang), step * std::sin(ang));
    Eigen::Vector2d p(0.0, 0.0);
    std::vector<Eigen::Vector2d> pts{p};
    double len = 0.0;
    int guard = 0;
    while (len < target_len && guard++ < 4096) {
        v = momentum * v + jitter * step * Eigen::Vector2d(rng.normal(), rng.normal());
        double vn = v.norm();
        if (vn > 2.0 * step) v *= 2.0 * step / vn;
        p += v;
        len += v.norm();
        pts.push_back(p);
    }

    BlurSpec spec;
    spec.k = k;
    spec.kernel = rasterize_trajectory(pts, k);
    spec.severity = severity;
    spec.seed = seed;
    return spec;
}

Image apply_blur(const Image& image, const BlurSpec& spec) {
    const int k = spec.k, half = k / 2;
    if (k > image.h || k > image.w)
        throw std::invalid_argument("apply_blur: kernel larger than image");
    auto reflect = [](int i, int n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
        return i;
    };
    Image out(image.h, image.w);
    for (int y = 0; y < image.h; ++y) {
        for (int x = 0; x < image.w; ++x) {
            double acc[3] = {0.0, 0.0, 0.0};
            for (int dy = 0; dy < k; ++dy) {
                int sy = reflect(y + dy - half, image.h);
                for (int dx = 0; dx < k; ++dx) {
                    int sx = reflect(x + dx - half, image.w);
                    double w = spec.at(dy, dx);
                    acc[0] += w * image.at(sy, sx, 0);
                    acc[1] += w * image.at(sy, sx, 1);
                    acc[2] += w * image.at(sy, sx, 2);
                }
            }
            for (int c = 0; c < 3; ++c)
                out.at(y, x, c) = std::min(1.0, std::max(0.0, acc[c]));
        }
    }
    return out;
}

double kernel_support_radius(const BlurSpec& spec) {
    double cx = 0.0, cy = 0.0;
    for (int y = 0; y < spec.k; ++y)
        for (int x = 0; x < spec.k; ++x) {
            cx += spec.at(y, x) * x;
            cy += spec.at(y, x) * y;
        }
    double r2 = 0.0;
    for (int y = 0; y < spec.k; ++y)
        for (int x = 0; x < spec.k; ++x) {
            double dx = x - cx, dy = y - cy;
            r2 += spec.at(y, x) * (dx * dx + dy * dy);
        }
    return std::sqrt(r2);
}

std::string dump_kernel(const BlurSpec& spec) {
    std::ostringstream os;
    os.precision(17);
    for (int y = 0; y < spec.k; ++y) {
        for (int x = 0; x < spec.k; ++x) {
            if (x) os << ' ';
            os << spec.at(y, x);
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace gardlab
