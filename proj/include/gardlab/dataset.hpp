#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gardlab/geometry.hpp"

namespace gardlab {

// Dataset layout, format "gardlab-ds-1":
//   <root>/manifest.json
//   <root>/scene_<id>/view_<k>.{raw|png}, depth_<k>.f32, poses.txt, intrinsics.txt
// The manifest records per-file SHA-256 checksums, scene seeds and splits.

struct SceneRecord {
    int id = 0;
    uint64_t seed = 0;
    int views = 0;
    std::string split;  // train | val | test
    std::string dir;
};

struct DatasetIndex {
    std::string root;
    std::string image_format;  // "raw" or "png16"
    std::vector<SceneRecord> scenes;

    std::vector<int> scene_ids(const std::string& split) const;
};

struct DatasetWriteOptions {
    std::string image_format = "raw";
};

void write_dataset(const std::string& root, const std::vector<MultiViewSample>& samples,
                   const std::vector<std::string>& splits, const DatasetWriteOptions& opts = {});

// Reads and validates the manifest (throws on missing manifest, version
// mismatch, or malformed records).
DatasetIndex read_manifest(const std::string& root);

// Loads one scene, verifying every file checksum against the manifest.
MultiViewSample read_scene(const DatasetIndex& index, int scene_id);

std::vector<MultiViewSample> read_dataset(const std::string& root,
                                          const std::string& split = "");

// Image containers used by the dataset (exposed for round-trip tests).
void write_image_raw(const std::string& path, const Image& img);
Image read_image_raw(const std::string& path);
void write_image_png16(const std::string& path, const Image& img);
Image read_image_png16(const std::string& path);
void write_depth_f32(const std::string& path, const DepthMap& depth);
DepthMap read_depth_f32(const std::string& path);

}  // namespace gardlab
