#include "gardlab/scene.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gardlab/tensor.hpp"

namespace gardlab {

namespace {

double lattice_hash(int64_t x, int64_t y, int64_t z, uint64_t seed) {
    uint64_t h = derive_seed(seed, static_cast<uint64_t>(x) * 0x8da6b343,
                             static_cast<uint64_t>(y) * 0xd8163841,
                             static_cast<uint64_t>(z) * 0xcb1ab31f);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

}  // namespace

double value_noise3(const Eigen::Vector3d& p, uint64_t seed) {
    Eigen::Vector3d f(std::floor(p.x()), std::floor(p.y()), std::floor(p.z()));
    int64_t ix = static_cast<int64_t>(f.x()), iy = static_cast<int64_t>(f.y()),
            iz = static_cast<int64_t>(f.z());
    double tx = smoothstep(p.x() - f.x());
    double ty = smoothstep(p.y() - f.y());
    double tz = smoothstep(p.z() - f.z());
    double acc = 0.0;
    for (int dz = 0; dz <= 1; ++dz)
        for (int dy = 0; dy <= 1; ++dy)
            for (int dx = 0; dx <= 1; ++dx) {
                double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
                acc += w * lattice_hash(ix + dx, iy + dy, iz + dz, seed);
            }
    return acc;
}

CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target) {
    Eigen::Vector3d z = (target - eye).normalized();
    Eigen::Vector3d up(0.0, 1.0, 0.0);
    if (std::fabs(z.dot(up)) > 0.999) up = Eigen::Vector3d(1.0, 0.0, 0.0);
    // camera y points down in world (+y image axis): x = down x z
    Eigen::Vector3d y_approx = -up;
    Eigen::Vector3d x = y_approx.cross(z).normalized();
    Eigen::Vector3d y = z.cross(x);
    Eigen::Matrix3d r;
    r.col(0) = x;
    r.col(1) = y;
    r.col(2) = z;
    return CameraPose(quat_from_matrix(r), eye);
}

namespace {

struct PrimHit {
    double t = std::numeric_limits<double>::infinity();
    Eigen::Vector3d normal = Eigen::Vector3d::Zero();
    bool ok = false;
};

PrimHit intersect_sphere(const Primitive& pr, const Eigen::Vector3d& o,
                         const Eigen::Vector3d& d) {
    PrimHit h;
    const Eigen::Vector3d c = pr.pose.translation;
    const double r = pr.size.x();
    Eigen::Vector3d oc = o - c;
    double a = d.squaredNorm();
    double b = 2.0 * oc.dot(d);
    double cc = oc.squaredNorm() - r * r;
    double disc = b * b - 4 * a * cc;
    if (disc < 0.0) return h;
    double sq = std::sqrt(disc);
    double t = (-b - sq) / (2 * a);
    if (t <= 1e-6) t = (-b + sq) / (2 * a);
    if (t <= 1e-6) return h;
    h.t = t;
    h.normal = (o + t * d - c).normalized();
    h.ok = true;
    return h;
}

PrimHit intersect_plane(const Primitive& pr, const Eigen::Vector3d& o,
                        const Eigen::Vector3d& d) {
    PrimHit h;
    Eigen::Matrix3d r = pr.pose.r();
    Eigen::Vector3d ol = r.transpose() * (o - pr.pose.translation);
    Eigen::Vector3d dl = r.transpose() * d;
    if (std::fabs(dl.z()) < 1e-12) return h;
    double t = -ol.z() / dl.z();
    if (t <= 1e-6) return h;
    Eigen::Vector3d p = ol + t * dl;
    if (std::fabs(p.x()) > pr.size.x() || std::fabs(p.y()) > pr.size.y()) return h;
    h.t = t;
    Eigen::Vector3d n = r.col(2);
    h.normal = n.dot(d) < 0.0 ? n : -n;
    h.ok = true;
    return h;
}

PrimHit intersect_box(const Primitive& pr, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
    PrimHit h;
    Eigen::Matrix3d r = pr.pose.r();
    Eigen::Vector3d ol = r.transpose() * (o - pr.pose.translation);
    Eigen::Vector3d dl = r.transpose() * d;
    double tmin = -std::numeric_limits<double>::infinity();
    double tmax = std::numeric_limits<double>::infinity();
    int axis_min = -1;
    for (int a = 0; a < 3; ++a) {
        double e = pr.size[a];
        if (std::fabs(dl[a]) < 1e-12) {
            if (std::fabs(ol[a]) > e) return h;
            continue;
        }
        double t0 = (-e - ol[a]) / dl[a];
        double t1 = (e - ol[a]) / dl[a];
        if (t0 > t1) std::swap(t0, t1);
        if (t0 > tmin) {
            tmin = t0;
            axis_min = a;
        }
        tmax = std::min(tmax, t1);
        if (tmin > tmax) return h;
    }
    double t = tmin;
    if (t <= 1e-6 || axis_min < 0) return h;  // origin inside or behind: ignore
    h.t = t;
    Eigen::Vector3d p = ol + t * dl;
    Eigen::Vector3d nl = Eigen::Vector3d::Zero();
    nl[axis_min] = p[axis_min] > 0.0 ? 1.0 : -1.0;
    h.normal = r * nl;
    h.ok = true;
    return h;
}

Eigen::Vector3d shade(const SceneSpec& spec, int prim_idx, const Eigen::Vector3d& point,
                      const Eigen::Vector3d& normal, const Eigen::Vector3d& light) {
    const Primitive& pr = spec.primitives[prim_idx];
    const TextureParams& tx = pr.texture;
    // solid 3D checker in object space so every surface carries texture
    Eigen::Matrix3d r = pr.pose.r();
    Eigen::Vector3d pl = r.transpose() * (point - pr.pose.translation);
    Eigen::Vector3d q = pl / tx.checker_scale;
    int64_t parity = static_cast<int64_t>(std::floor(q.x())) +
                     static_cast<int64_t>(std::floor(q.y())) +
                     static_cast<int64_t>(std::floor(q.z()));
    Eigen::Vector3d albedo = (parity & 1) ? tx.color_b : tx.color_a;
    double noise =
        value_noise3(pl / tx.noise_scale, derive_seed(spec.seed, 0x7e, prim_idx));
    albedo *= (1.0 - tx.noise_weight) + tx.noise_weight * noise;
    double diffuse = 0.35 + 0.65 * std::max(0.0, normal.dot(light));
    Eigen::Vector3d c = albedo * diffuse;
    return c.cwiseMax(0.0).cwiseMin(1.0);
}

std::vector<CameraPose> make_trajectory(const SceneSpec& spec, uint64_t attempt) {
    RandomStream rng(derive_seed(spec.seed, 0xca3, attempt));
    const TrajectorySpec& tr = spec.trajectory;
    std::vector<CameraPose> poses;
    double phase = rng.uniform(0.0, 2.0 * M_PI);
    switch (tr.kind) {
        case TrajectoryKind::kOrbit:
        case TrajectoryKind::kArc: {
            double span = tr.kind == TrajectoryKind::kOrbit ? 2.0 * M_PI
                                                            : tr.span_degrees * M_PI / 180.0;
            for (int i = 0; i < spec.view_count; ++i) {
                double a = phase + span * i / spec.view_count;
                Eigen::Vector3d eye(tr.radius * std::sin(a),
                                    tr.height + 0.25 * std::sin(a * 2.0 + phase),
                                    tr.radius * std::cos(a));
                poses.push_back(look_at(eye, Eigen::Vector3d::Zero()));
            }
            break;
        }
        case TrajectoryKind::kRandomWalk: {
            double a = phase;
            Eigen::Vector3d eye(tr.radius * std::sin(a), tr.height, tr.radius * std::cos(a));
            for (int i = 0; i < spec.view_count; ++i) {
                Eigen::Vector3d target(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                                       rng.uniform(-0.2, 0.2));
                poses.push_back(look_at(eye, target));
                Eigen::Vector3d step(rng.normal() * 0.45, rng.normal() * 0.2,
                                     rng.normal() * 0.45);
                eye += step;
                double rad = std::hypot(eye.x(), eye.z());
                double clamped = std::min(tr.radius + 0.8, std::max(tr.radius - 0.8, rad));
                if (rad > 1e-6) {
                    eye.x() *= clamped / rad;
                    eye.z() *= clamped / rad;
                }
                eye.y() = std::min(0.9, std::max(-0.9, eye.y()));
            }
            break;
        }
    }
    return poses;
}

Eigen::AlignedBox3d scene_bounds(const SceneSpec& spec) {
    Eigen::AlignedBox3d box;
    for (const Primitive& pr : spec.primitives) {
        if (pr.kind == PrimitiveKind::kSphere) {
            double r = pr.size.x();
            box.extend(pr.pose.translation + Eigen::Vector3d::Constant(r));
            box.extend(pr.pose.translation - Eigen::Vector3d::Constant(r));
            continue;
        }
        Eigen::Matrix3d r = pr.pose.r();
        for (int corner = 0; corner < 8; ++corner) {
            Eigen::Vector3d e((corner & 1) ? pr.size.x() : -pr.size.x(),
                              (corner & 2) ? pr.size.y() : -pr.size.y(),
                              (corner & 4) ? pr.size.z() : -pr.size.z());
            box.extend(pr.pose.translation + r * e);
        }
    }
    return box;
}

bool cameras_see_scene(const SceneSpec& spec, const std::vector<CameraPose>& poses,
                       const Intrinsics& intr) {
    Eigen::AlignedBox3d box = scene_bounds(spec);
    RandomStream rng(derive_seed(spec.seed, 0x5ee));
    std::vector<Eigen::Vector3d> probes;
    for (int i = 0; i < 256; ++i) {
        Eigen::Vector3d u(rng.uniform(), rng.uniform(), rng.uniform());
        probes.push_back(box.min() + u.cwiseProduct(box.sizes()));
    }
    for (const CameraPose& pose : poses) {
        int visible = 0;
        for (const auto& p : probes) {
            auto proj = project(p, pose, intr);
            if (proj && intr.in_bounds(proj->pixel.x(), proj->pixel.y())) ++visible;
        }
        if (visible < spec.min_visible_fraction * static_cast<double>(probes.size()))
            return false;
    }
    return true;
}

}  // namespace

RayHit cast_ray(const SceneSpec& spec, const Eigen::Vector3d& origin,
                const Eigen::Vector3d& dir) {
    RayHit best;
    for (size_t i = 0; i < spec.primitives.size(); ++i) {
        const Primitive& pr = spec.primitives[i];
        PrimHit h;
        switch (pr.kind) {
            case PrimitiveKind::kSphere: h = intersect_sphere(pr, origin, dir); break;
            case PrimitiveKind::kPlane: h = intersect_plane(pr, origin, dir); break;
            case PrimitiveKind::kBox: h = intersect_box(pr, origin, dir); break;
        }
        if (h.ok && h.t < best.t) {
            best.t = h.t;
            best.primitive = static_cast<int>(i);
            best.normal = h.normal;
        }
    }
    if (best.hit()) best.point = origin + best.t * dir;
    return best;
}

SceneSpec random_scene_spec(uint64_t seed, int views, int image_size) {
    RandomStream rng(derive_seed(seed, 0x5ce2e));
    SceneSpec spec;
    spec.seed = seed;
    spec.view_count = views;
    spec.image_size = image_size;

    int kind = rng.uniform_int(3);
    spec.trajectory.kind = kind == 0   ? TrajectoryKind::kOrbit
                           : kind == 1 ? TrajectoryKind::kArc
                                       : TrajectoryKind::kRandomWalk;
    spec.trajectory.radius = rng.uniform(3.2, 4.4);
    spec.trajectory.height = rng.uniform(-0.6, 0.6);
    spec.trajectory.span_degrees = rng.uniform(110.0, 170.0);

    auto random_texture = [&](double scale_lo, double scale_hi) {
        TextureParams tx;
        tx.color_a = Eigen::Vector3d(rng.uniform(0.65, 0.95), rng.uniform(0.65, 0.95),
                                     rng.uniform(0.65, 0.95));
        tx.color_b = Eigen::Vector3d(rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3),
                                     rng.uniform(0.05, 0.3));
        tx.checker_scale = rng.uniform(scale_lo, scale_hi);
        tx.noise_scale = rng.uniform(0.3, 0.8);
        tx.noise_weight = rng.uniform(0.15, 0.4);
        return tx;
    };

    // backdrop plane behind the origin; checker cells sized so they project
    // to roughly 4-8 px at the camera distance
    Primitive backdrop;
    backdrop.kind = PrimitiveKind::kPlane;
    backdrop.pose = CameraPose(Quat(), Eigen::Vector3d(0.0, 0.0, rng.uniform(-1.6, -0.9)));
    backdrop.size = Eigen::Vector3d(2.6, 2.6, 0.0);
    backdrop.texture = random_texture(0.28, 0.5);
    spec.primitives.push_back(backdrop);

    int extras = 2 + rng.uniform_int(3);
    for (int i = 0; i < extras; ++i) {
        Primitive pr;
        int k = rng.uniform_int(2);
        pr.kind = k == 0 ? PrimitiveKind::kSphere : PrimitiveKind::kBox;
        pr.pose = CameraPose(
            Quat(), Eigen::Vector3d(rng.uniform(-1.1, 1.1), rng.uniform(-0.8, 0.8),
                                    rng.uniform(-0.6, 0.9)));
        if (pr.kind == PrimitiveKind::kSphere) {
            double r = rng.uniform(0.35, 0.75);
            pr.size = Eigen::Vector3d(r, r, r);
        } else {
            pr.size = Eigen::Vector3d(rng.uniform(0.25, 0.65), rng.uniform(0.25, 0.65),
                                      rng.uniform(0.25, 0.65));
        }
        pr.texture = random_texture(0.18, 0.38);
        spec.primitives.push_back(pr);
    }
    return spec;
}

Intrinsics default_intrinsics(int image_size) {
    Intrinsics intr;
    intr.width = image_size;
    intr.height = image_size;
    intr.fx = intr.fy = static_cast<double>(image_size);
    intr.cx = (image_size - 1) / 2.0;
    intr.cy = (image_size - 1) / 2.0;
    return intr;
}

MultiViewSample render_with_poses(const SceneSpec& spec, const std::vector<CameraPose>& poses,
                                  const Intrinsics& intr) {
    if (spec.primitives.empty()) throw std::invalid_argument("render_with_poses: no primitives");
    const int ih = intr.height, iw = intr.width;

    RandomStream light_rng(derive_seed(spec.seed, 0x11647));
    Eigen::Vector3d light(light_rng.uniform(-0.6, 0.6), light_rng.uniform(-1.0, -0.3),
                          light_rng.uniform(-0.6, 0.6));
    light.normalize();
    light = -light;  // pointing from surface toward the light

    MultiViewSample sample;
    sample.intrinsics = intr;
    sample.seed = spec.seed;
    sample.poses = poses;
    for (size_t v = 0; v < poses.size(); ++v) {
        Image img(ih, iw);
        DepthMap depth(ih, iw);
        const CameraPose& pose = poses[v];
        Eigen::Matrix3d r = pose.r();
        for (int y = 0; y < ih; ++y) {
            for (int x = 0; x < iw; ++x) {
                Eigen::Vector3d dir_cam((x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, 1.0);
                Eigen::Vector3d dir = r * dir_cam;  // unit camera-z: hit t == z-depth
                RayHit hit = cast_ray(spec, pose.translation, dir);
                if (hit.hit()) {
                    Eigen::Vector3d c = shade(spec, hit.primitive, hit.point, hit.normal, light);
                    img.at(y, x, 0) = c.x();
                    img.at(y, x, 1) = c.y();
                    img.at(y, x, 2) = c.z();
                    // quantize to f32 so the on-disk depth round-trips exactly
                    depth.set(y, x, static_cast<double>(static_cast<float>(hit.t)));
                } else {
                    double bg = 0.04 + 0.05 * (static_cast<double>(y) / ih);
                    img.at(y, x, 0) = bg;
                    img.at(y, x, 1) = bg;
                    img.at(y, x, 2) = bg * 1.15;
                }
            }
        }
        sample.images.push_back(std::move(img));
        sample.depths.push_back(std::move(depth));
    }
    return sample;
}

MultiViewSample generate_scene(const SceneSpec& spec) {
    if (spec.primitives.empty()) throw std::invalid_argument("generate_scene: no primitives");
    Intrinsics intr = default_intrinsics(spec.image_size);
    std::vector<CameraPose> poses;
    bool placed = false;
    for (uint64_t attempt = 0; attempt < 16; ++attempt) {
        poses = make_trajectory(spec, attempt);
        if (cameras_see_scene(spec, poses, intr)) {
            placed = true;
            break;
        }
    }
    if (!placed) throw std::runtime_error("generate_scene: unviewable scene");
    return render_with_poses(spec, poses, intr);
}

ViewSelectionStrategy view_strategy_from_string(const std::string& s) {
    if (s == "near-camera") return ViewSelectionStrategy::kNearCamera;
    if (s == "near-random") return ViewSelectionStrategy::kNearRandom;
    throw std::invalid_argument("unknown view selection strategy: " + s);
}

std::string to_string(ViewSelectionStrategy s) {
    return s == ViewSelectionStrategy::kNearCamera ? "near-camera" : "near-random";
}

double view_overlap(const MultiViewSample& sample, int anchor, int candidate, int stride) {
    const DepthMap& d = sample.depths[anchor];
    int total = 0, landed = 0;
    for (int y = 0; y < d.h; y += stride) {
        for (int x = 0; x < d.w; x += stride) {
            if (!d.is_valid(y, x)) continue;
            ++total;
            Correspondence c =
                gt_correspondence(Eigen::Vector2d(x, y), anchor, candidate, sample);
            if (c.ok()) ++landed;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(landed) / total;
}

std::vector<int> select_views(const MultiViewSample& sample, int v,
                              ViewSelectionStrategy strategy, int expansion_ratio, uint64_t seed,
                              int anchor) {
    const int total = sample.view_count();
    if (expansion_ratio < 1) throw std::invalid_argument("select_views: expansion_ratio >= 1");
    std::vector<int> candidates;
    for (int i = 0; i < total; ++i)
        if (i != anchor) candidates.push_back(i);
    if (v > static_cast<int>(candidates.size()))
        throw std::runtime_error("select_views: insufficient views");

    if (strategy == ViewSelectionStrategy::kNearCamera) {
        std::vector<std::pair<double, int>> ranked;
        for (int c : candidates) ranked.emplace_back(-view_overlap(sample, anchor, c), c);
        std::stable_sort(ranked.begin(), ranked.end());
        int window = std::min<int>(static_cast<int>(ranked.size()),
                                   v * expansion_ratio);
        std::vector<int> out;
        for (int i = 0; i < v && i < window; ++i) out.push_back(ranked[i].second);
        return out;
    }

    // near-random: window of nearest-by-index frames around the anchor
    std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
        int da = std::abs(a - anchor), db = std::abs(b - anchor);
        return da != db ? da < db : a < b;
    });
    int window = std::min<int>(static_cast<int>(candidates.size()), v * expansion_ratio);
    std::vector<int> pool(candidates.begin(), candidates.begin() + window);
    RandomStream rng(derive_seed(seed, 0x5e1ec7, static_cast<uint64_t>(anchor)));
    std::vector<int> out;
    for (int i = 0; i < v; ++i) {
        int idx = rng.uniform_int(static_cast<int>(pool.size()));
        out.push_back(pool[idx]);
        pool.erase(pool.begin() + idx);
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace gardlab
