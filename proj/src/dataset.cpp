#include "gardlab/dataset.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "gardlab/checkpoint.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gardlab {

namespace {

constexpr const char* kFormatVersion = "gardlab-ds-1";

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("dataset: truncated " + what);
    return v;
}

std::string view_file_name(const std::string& image_format, int k) {
    return "view_" + std::to_string(k) + (image_format == "png16" ? ".png" : ".raw");
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("dataset: cannot write " + path);
    os << content;
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("dataset: cannot read " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

void write_image_raw(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("dataset: cannot write " + path);
    write_pod<uint32_t>(os, static_cast<uint32_t>(img.h));
    write_pod<uint32_t>(os, static_cast<uint32_t>(img.w));
    write_pod<uint32_t>(os, 3);
    for (double v : img.rgb) write_pod<float>(os, static_cast<float>(v));
}

Image read_image_raw(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot read " + path);
    uint32_t h = read_pod<uint32_t>(is, path);
    uint32_t w = read_pod<uint32_t>(is, path);
    uint32_t c = read_pod<uint32_t>(is, path);
    if (c != 3) throw std::runtime_error("dataset: bad channel count in " + path);
    Image img(static_cast<int>(h), static_cast<int>(w));
    for (double& v : img.rgb) v = read_pod<float>(is, path);
    return img;
}

void write_image_png16(const std::string& path, const Image& img) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("dataset: cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("dataset: libpng write failure for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.w, img.h, 16, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<uint16_t> row(static_cast<size_t>(img.w) * 3);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = std::min(1.0, std::max(0.0, img.at(y, x, c)));
                uint16_t q = static_cast<uint16_t>(std::lround(v * 65535.0));
                // PNG stores 16-bit samples big-endian
                row[static_cast<size_t>(x) * 3 + c] =
                    static_cast<uint16_t>((q >> 8) | (q << 8));
            }
        png_write_row(png, reinterpret_cast<png_bytep>(row.data()));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

Image read_image_png16(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("dataset: cannot read " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("dataset: libpng read failure for " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    if (png_get_bit_depth(png, info) != 16 ||
        png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("dataset: unsupported png layout in " + path);
    }
    int w = static_cast<int>(png_get_image_width(png, info));
    int h = static_cast<int>(png_get_image_height(png, info));
    Image img(h, w);
    std::vector<uint16_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, reinterpret_cast<png_bytep>(row.data()), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                uint16_t be = row[static_cast<size_t>(x) * 3 + c];
                uint16_t q = static_cast<uint16_t>((be >> 8) | (be << 8));
                img.at(y, x, c) = q / 65535.0;
            }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

void write_depth_f32(const std::string& path, const DepthMap& depth) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("dataset: cannot write " + path);
    write_pod<uint32_t>(os, static_cast<uint32_t>(depth.h));
    write_pod<uint32_t>(os, static_cast<uint32_t>(depth.w));
    for (size_t i = 0; i < depth.values.size(); ++i)
        write_pod<float>(os, depth.valid[i] ? static_cast<float>(depth.values[i]) : 0.0f);
}

DepthMap read_depth_f32(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot read " + path);
    uint32_t h = read_pod<uint32_t>(is, path);
    uint32_t w = read_pod<uint32_t>(is, path);
    DepthMap d(static_cast<int>(h), static_cast<int>(w));
    for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) d.set(y, x, read_pod<float>(is, path));
    return d;
}

namespace {

std::string format_poses(const std::vector<CameraPose>& poses) {
    std::ostringstream os;
    os.precision(17);
    for (size_t k = 0; k < poses.size(); ++k) {
        const CameraPose& p = poses[k];
        os << k << ' ' << p.rotation.w << ' ' << p.rotation.x << ' ' << p.rotation.y << ' '
           << p.rotation.z << ' ' << p.translation.x() << ' ' << p.translation.y() << ' '
           << p.translation.z() << '\n';
    }
    return os.str();
}

std::vector<CameraPose> parse_poses(const std::string& text, int expected) {
    std::istringstream is(text);
    std::vector<CameraPose> poses(expected);
    std::vector<bool> seen(expected, false);
    int k;
    double qw, qx, qy, qz, tx, ty, tz;
    while (is >> k >> qw >> qx >> qy >> qz >> tx >> ty >> tz) {
        if (k < 0 || k >= expected) throw std::runtime_error("dataset: bad pose index");
        poses[k] = CameraPose(Quat(qw, qx, qy, qz), Eigen::Vector3d(tx, ty, tz));
        seen[k] = true;
    }
    for (bool s : seen)
        if (!s) throw std::runtime_error("dataset: missing pose record");
    return poses;
}

std::string format_intrinsics(const Intrinsics& intr) {
    std::ostringstream os;
    os.precision(17);
    os << intr.fx << ' ' << intr.fy << ' ' << intr.cx << ' ' << intr.cy << ' ' << intr.width
       << ' ' << intr.height << '\n';
    return os.str();
}

Intrinsics parse_intrinsics(const std::string& text) {
    std::istringstream is(text);
    Intrinsics intr;
    if (!(is >> intr.fx >> intr.fy >> intr.cx >> intr.cy >> intr.width >> intr.height))
        throw std::runtime_error("dataset: malformed intrinsics");
    intr.validate();
    return intr;
}

}  // namespace

void write_dataset(const std::string& root, const std::vector<MultiViewSample>& samples,
                   const std::vector<std::string>& splits, const DatasetWriteOptions& opts) {
    if (!splits.empty() && splits.size() != samples.size())
        throw std::invalid_argument("write_dataset: splits size mismatch");
    fs::create_directories(root);
    json manifest;
    manifest["format"] = kFormatVersion;
    manifest["image_format"] = opts.image_format;
    manifest["scenes"] = json::array();

    for (size_t i = 0; i < samples.size(); ++i) {
        const MultiViewSample& s = samples[i];
        std::string dir = "scene_" + std::to_string(i);
        fs::create_directories(fs::path(root) / dir);
        json files = json::object();
        auto emit = [&](const std::string& name, auto&& writer) {
            std::string path = (fs::path(root) / dir / name).string();
            writer(path);
            files[name] = file_sha256(path);
        };
        for (int v = 0; v < s.view_count(); ++v) {
            emit(view_file_name(opts.image_format, v), [&](const std::string& p) {
                if (opts.image_format == "png16")
                    write_image_png16(p, s.images[v]);
                else
                    write_image_raw(p, s.images[v]);
            });
            emit("depth_" + std::to_string(v) + ".f32",
                 [&](const std::string& p) { write_depth_f32(p, s.depths[v]); });
        }
        emit("poses.txt",
             [&](const std::string& p) { write_text_file(p, format_poses(s.poses)); });
        emit("intrinsics.txt",
             [&](const std::string& p) { write_text_file(p, format_intrinsics(s.intrinsics)); });

        json rec;
        rec["id"] = static_cast<int>(i);
        rec["seed"] = s.seed;
        rec["views"] = s.view_count();
        rec["split"] = splits.empty() ? "train" : splits[i];
        rec["dir"] = dir;
        rec["files"] = files;
        manifest["scenes"].push_back(rec);
    }
    write_text_file((fs::path(root) / "manifest.json").string(), manifest.dump(2) + "\n");
}

DatasetIndex read_manifest(const std::string& root) {
    fs::path mpath = fs::path(root) / "manifest.json";
    if (!fs::exists(mpath)) throw std::runtime_error("dataset: missing manifest in " + root);
    json manifest = json::parse(read_text_file(mpath.string()));
    if (manifest.value("format", "") != kFormatVersion)
        throw std::runtime_error("dataset: format version mismatch in " + root);
    DatasetIndex index;
    index.root = root;
    index.image_format = manifest.value("image_format", "raw");
    for (const auto& rec : manifest.at("scenes")) {
        SceneRecord sr;
        sr.id = rec.at("id").get<int>();
        sr.seed = rec.at("seed").get<uint64_t>();
        sr.views = rec.at("views").get<int>();
        sr.split = rec.at("split").get<std::string>();
        sr.dir = rec.at("dir").get<std::string>();
        index.scenes.push_back(sr);
    }
    return index;
}

std::vector<int> DatasetIndex::scene_ids(const std::string& split) const {
    std::vector<int> out;
    for (const auto& s : scenes)
        if (split.empty() || s.split == split) out.push_back(s.id);
    return out;
}

MultiViewSample read_scene(const DatasetIndex& index, int scene_id) {
    const SceneRecord* rec = nullptr;
    for (const auto& s : index.scenes)
        if (s.id == scene_id) rec = &s;
    if (!rec) throw std::runtime_error("dataset: unknown scene id " + std::to_string(scene_id));

    // re-read the manifest for this scene's checksums
    json manifest =
        json::parse(read_text_file((fs::path(index.root) / "manifest.json").string()));
    const json* files = nullptr;
    for (const auto& r : manifest.at("scenes"))
        if (r.at("id").get<int>() == scene_id) files = &r.at("files");
    if (!files) throw std::runtime_error("dataset: scene missing from manifest");

    fs::path dir = fs::path(index.root) / rec->dir;
    for (auto it = files->begin(); it != files->end(); ++it) {
        std::string path = (dir / it.key()).string();
        if (!fs::exists(path)) throw std::runtime_error("dataset: missing file " + path);
        if (file_sha256(path) != it.value().get<std::string>())
            throw std::runtime_error("dataset: checksum mismatch for " + path);
    }

    MultiViewSample s;
    s.seed = rec->seed;
    s.intrinsics = parse_intrinsics(read_text_file((dir / "intrinsics.txt").string()));
    s.poses = parse_poses(read_text_file((dir / "poses.txt").string()), rec->views);
    for (int v = 0; v < rec->views; ++v) {
        std::string ipath = (dir / view_file_name(index.image_format, v)).string();
        s.images.push_back(index.image_format == "png16" ? read_image_png16(ipath)
                                                         : read_image_raw(ipath));
        s.depths.push_back(read_depth_f32((dir / ("depth_" + std::to_string(v) + ".f32")).string()));
    }
    return s;
}

std::vector<MultiViewSample> read_dataset(const std::string& root, const std::string& split) {
    DatasetIndex index = read_manifest(root);
    std::vector<MultiViewSample> out;
    for (int id : index.scene_ids(split)) out.push_back(read_scene(index, id));
    return out;
}

}  // namespace gardlab
