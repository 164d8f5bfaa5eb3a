#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "gardlab/geometry.hpp"

namespace gardlab {

enum class PrimitiveKind { kPlane, kBox, kSphere };

struct TextureParams {
    Eigen::Vector3d color_a = Eigen::Vector3d(0.9, 0.9, 0.9);
    Eigen::Vector3d color_b = Eigen::Vector3d(0.1, 0.1, 0.1);
    double checker_scale = 0.3;  // world units per checker cell
    double noise_scale = 0.5;
    double noise_weight = 0.3;
};

struct Primitive {
    PrimitiveKind kind = PrimitiveKind::kSphere;
    CameraPose pose;             // object-to-world
    Eigen::Vector3d size = Eigen::Vector3d::Ones();  // plane/box: half extents; sphere: radius in x
    TextureParams texture;
};

enum class TrajectoryKind { kOrbit, kArc, kRandomWalk };

struct TrajectorySpec {
    TrajectoryKind kind = TrajectoryKind::kOrbit;
    double radius = 3.5;
    double height = 0.0;
    double span_degrees = 360.0;  // used by arc
};

struct SceneSpec {
    uint64_t seed = 0;
    std::vector<Primitive> primitives;
    TrajectorySpec trajectory;
    int view_count = 12;
    int image_size = 64;
    double min_visible_fraction = 0.3;
};

// Procedural scene sampler: one textured backdrop plane plus a few foreground
// boxes/spheres, cameras on an orbit/arc/random-walk around the origin.
SceneSpec random_scene_spec(uint64_t seed, int views = 12, int image_size = 64);

// CPU ray casting with flat shading and procedural checker/value-noise
// texture; exact analytic z-depth per pixel. Deterministic given spec.seed.
// Retries camera placement up to 16 times, then throws "unviewable scene".
MultiViewSample generate_scene(const SceneSpec& spec);

// Render with explicit camera poses (no trajectory/visibility logic).
MultiViewSample render_with_poses(const SceneSpec& spec, const std::vector<CameraPose>& poses,
                                  const Intrinsics& intr);
Intrinsics default_intrinsics(int image_size);

// Ray-cast a single ray; returns hit t (camera z when dir has unit z) or
// infinity. Exposed for the depth-consistency oracle.
struct RayHit {
    double t = std::numeric_limits<double>::infinity();
    int primitive = -1;
    Eigen::Vector3d point = Eigen::Vector3d::Zero();
    Eigen::Vector3d normal = Eigen::Vector3d::Zero();
    bool hit() const { return primitive >= 0; }
};
RayHit cast_ray(const SceneSpec& spec, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir);

CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target);

enum class ViewSelectionStrategy { kNearCamera, kNearRandom };

ViewSelectionStrategy view_strategy_from_string(const std::string& s);
std::string to_string(ViewSelectionStrategy s);

// Geometric overlap of a candidate view with the anchor: the fraction of
// anchor pixels with valid depth whose correspondence lands in-frame and
// unoccluded in the candidate.
double view_overlap(const MultiViewSample& sample, int anchor, int candidate, int stride = 2);

// near-camera: rank candidates by overlap with the anchor, window of
// v*expansion_ratio, take the top v. near-random: window of
// v*expansion_ratio nearest-by-index frames, sample v uniformly (seeded).
std::vector<int> select_views(const MultiViewSample& sample, int v,
                              ViewSelectionStrategy strategy, int expansion_ratio, uint64_t seed,
                              int anchor = 0);

// Deterministic value noise in [0,1] used by the procedural textures.
double value_noise3(const Eigen::Vector3d& p, uint64_t seed);

}  // namespace gardlab
