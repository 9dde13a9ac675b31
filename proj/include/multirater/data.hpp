#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "multirater/morphology.hpp"
#include "multirater/pgm.hpp"
#include "multirater/rng.hpp"
#include "multirater/tensor.hpp"

namespace multirater {

// Raw synthetic intensities live in this fixed range; 16-bit storage maps
// it affinely so generated images survive a write/read round trip to
// within one quantization step (~2e-5).
inline constexpr double kRawLo = -0.2;
inline constexpr double kRawHi = 1.2;

struct GenConfig {
    int num_cases = 50;
    int image_size = 64;
    int num_shapes = 3;  // 1..num_shapes ellipses per case
    int se_radius = 2;
    double noise_std = 0.05;
    std::vector<RaterOp> rater_ops = {RaterOp::erode, RaterOp::identity, RaterOp::dilate};
    uint64_t seed = 0;
    double test_fraction = 0.2;

    void validate() const {
        if (num_cases < 1) throw std::invalid_argument("GenConfig: num_cases must be >= 1");
        if (image_size < 8) throw std::invalid_argument("GenConfig: image_size must be >= 8");
        if (num_shapes < 1) throw std::invalid_argument("GenConfig: num_shapes must be >= 1");
        if (se_radius < 1) throw std::invalid_argument("GenConfig: se_radius must be >= 1");
        if (noise_std < 0) throw std::invalid_argument("GenConfig: noise_std must be >= 0");
        if (rater_ops.empty()) throw std::invalid_argument("GenConfig: rater_ops is empty");
        if (test_fraction < 0 || test_fraction >= 1)
            throw std::invalid_argument("GenConfig: test_fraction must be in [0,1)");
    }
};

struct MultiRaterCase {
    std::string case_id;
    Tensor image;  // (h, w), values in (-1, 1)
    std::vector<Mask> rater_masks;
    std::vector<std::string> rater_ids;

    int num_raters() const { return static_cast<int>(rater_masks.size()); }
};

struct ManifestCase {
    std::string id;
    std::string image;               // path relative to the manifest
    std::vector<std::string> masks;  // one per rater, ordered
    std::string split;               // "train" or "test"
};

struct DatasetManifest {
    int version = 1;
    std::vector<std::string> raters;
    int se_radius = 2;
    uint64_t seed = 0;
    double noise_std = 0.0;
    int image_size = 0;
    std::vector<ManifestCase> cases;
    std::filesystem::path root;  // directory holding the manifest; not serialized

    int num_raters() const { return static_cast<int>(raters.size()); }

    nlohmann::json to_json() const {
        nlohmann::json jc = nlohmann::json::array();
        for (const ManifestCase& c : cases)
            jc.push_back({{"id", c.id}, {"image", c.image}, {"masks", c.masks},
                          {"split", c.split}});
        return {{"version", version}, {"raters", raters},   {"se_radius", se_radius},
                {"seed", seed},       {"noise_std", noise_std}, {"image_size", image_size},
                {"cases", jc}};
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("manifest: cannot write " + path.string());
        out << to_json().dump(2) << "\n";
        if (!out) throw std::runtime_error("manifest: write failed for " + path.string());
    }

    static DatasetManifest load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("manifest: cannot open " + path.string());
        nlohmann::json j;
        in >> j;
        DatasetManifest m;
        m.version = j.at("version").get<int>();
        if (m.version != 1)
            throw std::runtime_error("manifest: unsupported version " +
                                     std::to_string(m.version));
        m.raters = j.at("raters").get<std::vector<std::string>>();
        m.se_radius = j.at("se_radius").get<int>();
        m.seed = j.at("seed").get<uint64_t>();
        m.noise_std = j.value("noise_std", 0.0);
        m.image_size = j.value("image_size", 0);
        for (const auto& c : j.at("cases")) {
            ManifestCase mc;
            mc.id = c.at("id").get<std::string>();
            mc.image = c.at("image").get<std::string>();
            mc.masks = c.at("masks").get<std::vector<std::string>>();
            mc.split = c.at("split").get<std::string>();
            if (mc.masks.size() != m.raters.size())
                throw std::runtime_error("manifest: case " + mc.id + " has " +
                                         std::to_string(mc.masks.size()) + " masks, expected " +
                                         std::to_string(m.raters.size()));
            m.cases.push_back(std::move(mc));
        }
        m.root = path.parent_path();
        return m;
    }
};

namespace detail {

/// Renders 1..max_shapes random filled ellipses into a binary mask.
inline Mask render_shapes(int size, int max_shapes, Rng& rng) {
    Mask mask(size, size);
    const int n_shapes = 1 + rng.uniform_int(max_shapes);
    for (int s = 0; s < n_shapes; ++s) {
        const double cx = rng.uniform(0.25, 0.75) * size;
        const double cy = rng.uniform(0.25, 0.75) * size;
        const double a = rng.uniform(0.10, 0.22) * size;
        const double b = rng.uniform(0.10, 0.22) * size;
        const double theta = rng.uniform(0.0, 3.14159265358979323846);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                const double u = (dx * ct + dy * st) / a;
                const double v = (-dx * st + dy * ct) / b;
                if (u * u + v * v <= 1.0) mask.v[static_cast<size_t>(y) * size + x] = 1;
            }
    }
    return mask;
}

/// A base mask is usable when it has enough area, survives erosion, and
/// keeps an se_radius+1 margin from the border so dilation is not clipped.
inline bool mask_usable(const Mask& mask, int se_radius) {
    if (mask.area() < 20) return false;
    const int margin = se_radius + 1;
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x)
            if (mask.at(y, x) &&
                (y < margin || x < margin || y >= mask.h - margin || x >= mask.w - margin))
                return false;
    return erode(mask, se_radius).area() > 0;
}

/// 3x3 box blur with zero padding, fixed 1/9 weight.
inline Tensor box_blur3(const Tensor& t) {
    const int h = t.dim(0), w = t.dim(1);
    Tensor out({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < h && xx >= 0 && xx < w) acc += t.at(yy, xx);
                }
            out[static_cast<size_t>(y) * w + x] = static_cast<float>(acc / 9.0);
        }
    return out;
}

/// Raw intensity: bright object + blurred halo + low-amplitude sinusoidal
/// background texture + Gaussian noise, clipped to the fixed raw range.
/// With noise_std = 0 foreground stays >= 0.54 and background <= 0.46, so
/// a 0.5 threshold recovers the base mask exactly.
inline Tensor compose_image(const Mask& base, double noise_std, Rng& rng) {
    const int h = base.h, w = base.w;
    Tensor m = mask_to_tensor(base);
    Tensor blur = box_blur3(m);
    const double px = rng.uniform(0.0, 6.28318530717958647692);
    const double py = rng.uniform(0.0, 6.28318530717958647692);
    Tensor img({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const size_t i = static_cast<size_t>(y) * w + x;
            double v = 0.6 * m[i] + 0.4 * blur[i] +
                       0.1 * std::sin(0.31 * x + px) * std::sin(0.27 * y + py);
            if (noise_std > 0) v += noise_std * rng.normal();
            img[i] = static_cast<float>(std::clamp(v, kRawLo, kRawHi));
        }
    return img;
}

inline uint16_t raw_to_u16(double v) {
    const double t = (std::clamp(v, kRawLo, kRawHi) - kRawLo) / (kRawHi - kRawLo);
    return static_cast<uint16_t>(std::lround(t * 65535.0));
}

inline double u16_to_raw(uint16_t v) {
    return kRawLo + (static_cast<double>(v) / 65535.0) * (kRawHi - kRawLo);
}

} // namespace detail

/// Writes a {0,1} mask as an 8-bit {0,255} graymap.
inline void write_mask_pgm(const std::filesystem::path& path, const Mask& mask) {
    PgmImage img;
    img.width = mask.w;
    img.height = mask.h;
    img.maxval = 255;
    img.pixels.resize(mask.size());
    for (size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask.v[i] ? 255 : 0;
    write_pgm(path, img);
}

/// Reads a graymap back to a binary mask, thresholding at half of maxval.
inline Mask read_mask_pgm(const std::filesystem::path& path) {
    const PgmImage img = read_pgm(path);
    Mask mask(img.height, img.width);
    const double half = 0.5 * img.maxval;
    for (size_t i = 0; i < img.size(); ++i) mask.v[i] = img.pixels[i] >= half ? 1 : 0;
    return mask;
}

/// Writes raw intensities through the fixed affine to a 16-bit graymap.
inline void write_image_pgm(const std::filesystem::path& path, const Tensor& raw) {
    PgmImage img;
    img.width = raw.dim(1);
    img.height = raw.dim(0);
    img.maxval = 65535;
    img.pixels.resize(raw.size());
    for (size_t i = 0; i < raw.size(); ++i) img.pixels[i] = detail::raw_to_u16(raw[i]);
    write_pgm(path, img);
}

/// Reads a 16-bit graymap back to raw intensities.
inline Tensor read_image_pgm(const std::filesystem::path& path) {
    const PgmImage img = read_pgm(path);
    if (img.maxval != 65535)
        throw std::runtime_error("image pgm: expected 16-bit data in " + path.string());
    Tensor t({img.height, img.width});
    for (size_t i = 0; i < img.size(); ++i) t[i] = static_cast<float>(detail::u16_to_raw(img.pixels[i]));
    return t;
}

/// Generates the synthetic multi-rater dataset under output_dir and writes
/// manifest.json. Each case draws from its own (seed, index)-keyed stream,
/// so the output is reproducible case by case.
inline DatasetManifest generate_dataset(const GenConfig& cfg,
                                        const std::filesystem::path& output_dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(output_dir / "images");
    fs::create_directories(output_dir / "masks");

    DatasetManifest manifest;
    manifest.se_radius = cfg.se_radius;
    manifest.seed = cfg.seed;
    manifest.noise_std = cfg.noise_std;
    manifest.image_size = cfg.image_size;
    for (const RaterOp op : cfg.rater_ops) manifest.raters.push_back(rater_op_name(op));
    manifest.root = output_dir;

    const int n_test = static_cast<int>(std::lround(cfg.num_cases * cfg.test_fraction));
    const int n_train = cfg.num_cases - n_test;

    Rng root(cfg.seed);
    for (int i = 0; i < cfg.num_cases; ++i) {
        Rng rng = root.substream(static_cast<uint64_t>(i));
        Mask base;
        bool ok = false;
        for (int attempt = 0; attempt < 100; ++attempt) {
            base = detail::render_shapes(cfg.image_size, cfg.num_shapes, rng);
            if (detail::mask_usable(base, cfg.se_radius)) {
                ok = true;
                break;
            }
        }
        if (!ok)
            throw std::runtime_error("generate_dataset: no usable shape for case " +
                                     std::to_string(i) + " after 100 attempts");
        const Tensor raw = detail::compose_image(base, cfg.noise_std, rng);
        const std::vector<Mask> masks = simulate_raters(base, cfg.rater_ops, cfg.se_radius);

        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "case_%04d", i);
        ManifestCase mc;
        mc.id = idbuf;
        mc.image = std::string("images/") + idbuf + ".pgm";
        write_image_pgm(output_dir / mc.image, raw);
        for (size_t r = 0; r < masks.size(); ++r) {
            const std::string rel =
                std::string("masks/") + idbuf + "_r" + std::to_string(r) + ".pgm";
            write_mask_pgm(output_dir / rel, masks[r]);
            mc.masks.push_back(rel);
        }
        mc.split = i < n_train ? "train" : "test";
        manifest.cases.push_back(std::move(mc));
    }
    manifest.save(output_dir / "manifest.json");
    return manifest;
}

/// Loads one case: image affinely rescaled from its stored min/max to
/// (-1+eps, 1-eps) with eps = 1e-3 (constant images map to all zeros),
/// masks binarized at 0.5.
inline MultiRaterCase load_case(const DatasetManifest& manifest, const ManifestCase& entry) {
    MultiRaterCase c;
    c.case_id = entry.id;
    Tensor stored = read_image_pgm(manifest.root / entry.image);
    float lo = stored[0], hi = stored[0];
    for (size_t i = 0; i < stored.size(); ++i) {
        lo = std::min(lo, stored[i]);
        hi = std::max(hi, stored[i]);
    }
    c.image.resize(stored.shape());
    constexpr double eps = 1e-3;
    if (hi - lo > 1e-12) {
        const double scale = (2.0 - 2.0 * eps) / (hi - lo);
        for (size_t i = 0; i < stored.size(); ++i)
            c.image[i] = static_cast<float>((stored[i] - lo) * scale + (-1.0 + eps));
    }
    for (const std::string& rel : entry.masks) {
        Mask m = read_mask_pgm(manifest.root / rel);
        if (m.h != c.image.dim(0) || m.w != c.image.dim(1))
            throw std::runtime_error("load_case: mask " + rel + " shape differs from image");
        c.rater_masks.push_back(std::move(m));
    }
    c.rater_ids = manifest.raters;
    return c;
}

/// Loads every case of the given split ("train" or "test").
inline std::vector<MultiRaterCase> load_split(const DatasetManifest& manifest,
                                              const std::string& split) {
    std::vector<MultiRaterCase> cases;
    for (const ManifestCase& mc : manifest.cases)
        if (mc.split == split) cases.push_back(load_case(manifest, mc));
    return cases;
}

/// The shuffled-annotation ablation: independently permutes each case's
/// rater mask order with a seeded stream. The mask multiset per case is
/// unchanged; only the branch-to-rater correspondence breaks.
inline std::vector<MultiRaterCase> shuffle_annotations(std::vector<MultiRaterCase> cases,
                                                       uint64_t seed) {
    Rng root(seed);
    for (size_t i = 0; i < cases.size(); ++i) {
        Rng rng = root.substream(i);
        rng.shuffle(cases[i].rater_masks);
    }
    return cases;
}

} // namespace multirater
