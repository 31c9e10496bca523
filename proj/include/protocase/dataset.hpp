#pragma once

// Synthetic three-margin-type dataset with ground-truth relevance masks.
//
// Each sample is a filled blob on textured background. Margin types differ in
// boundary character: circumscribed = smooth sharp edge, indistinct = wide
// blurred ramp, spiculated = radial spikes. Masks follow the 0=relevant,
// 1=irrelevant convention. An optional corner tag correlated with the margin
// type serves as a planted confounder.

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "protocase/common.hpp"
#include "protocase/image.hpp"
#include "protocase/png_io.hpp"
#include "protocase/rng.hpp"

namespace protocase {

enum class Split : int { Train = 0, Validation = 1, Test = 2 };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Validation: return "validation";
        case Split::Test: return "test";
    }
    return "?";
}

inline Split split_from_name(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "validation") return Split::Validation;
    if (s == "test") return Split::Test;
    throw DataError("manifest: unknown split '" + s + "'");
}

struct Sample {
    std::string id;
    MarginType margin = MarginType::Circumscribed;
    int malignancy = 0;
    Split split = Split::Train;
    Image image;        // [0,1], quantized to the 8-bit grid
    Image lesion_mask;  // 0 = lesion + context margin, 1 = elsewhere
    std::optional<Image> fine_mask;  // 0 = margin-relevant band, 1 = elsewhere

    bool operator==(const Sample& o) const {
        return id == o.id && margin == o.margin && malignancy == o.malignancy &&
               split == o.split && image == o.image && lesion_mask == o.lesion_mask &&
               fine_mask == o.fine_mask;
    }
};

struct GeneratorConfig {
    int n_per_type = 300;
    int image_h = 64;
    int image_w = 64;
    int context_margin_px = 8;
    double fine_fraction = 0.12;
    std::uint64_t seed = 7;
    double confounder_strength = 0.0;  // 0 disables the corner tag
    double train_frac = 0.73;
    double val_frac = 0.12;
};

struct Dataset {
    GeneratorConfig config;
    std::vector<Sample> samples;

    std::vector<int> indices_of(Split s) const {
        std::vector<int> out;
        for (int i = 0; i < static_cast<int>(samples.size()); ++i)
            if (samples[i].split == s) out.push_back(i);
        return out;
    }

    bool operator==(const Dataset& o) const { return samples == o.samples; }
};

namespace detail {

// Boundary radius as a function of angle: smooth low-order variation plus,
// for spiculated margins, narrow radial spike bumps.
struct BlobShape {
    double cy = 0, cx = 0;
    double r0 = 0;
    double edge_sigma = 1.0;
    double interior = 0.7;
    std::vector<double> smooth_amp, smooth_phase;   // harmonics 2..4
    std::vector<double> spike_theta, spike_amp, spike_sigma;

    double radius_smooth(double theta) const {
        double r = r0;
        for (std::size_t i = 0; i < smooth_amp.size(); ++i)
            r += r0 * smooth_amp[i] * std::cos((static_cast<double>(i) + 2.0) * theta + smooth_phase[i]);
        return r;
    }

    double radius(double theta) const {
        double r = radius_smooth(theta);
        for (std::size_t i = 0; i < spike_theta.size(); ++i) {
            double d = theta - spike_theta[i];
            while (d > 3.14159265358979323846) d -= 2.0 * 3.14159265358979323846;
            while (d < -3.14159265358979323846) d += 2.0 * 3.14159265358979323846;
            const double u = d / spike_sigma[i];
            r += spike_amp[i] * std::exp(-0.5 * u * u);
        }
        return r;
    }
};

inline BlobShape draw_blob(MarginType type, const GeneratorConfig& cfg, Rng& rng) {
    const double m = std::min(cfg.image_h, cfg.image_w);
    BlobShape b;
    b.cy = (cfg.image_h - 1) / 2.0 + rng.uniform(-0.02, 0.02) * m;
    b.cx = (cfg.image_w - 1) / 2.0 + rng.uniform(-0.02, 0.02) * m;
    b.r0 = m * rng.uniform(0.14, 0.19);
    b.interior = rng.uniform(0.62, 0.78);
    for (int hgen = 0; hgen < 3; ++hgen) {
        b.smooth_amp.push_back(rng.uniform(0.0, 0.05));
        b.smooth_phase.push_back(rng.uniform(0.0, 6.283185307179586));
    }
    switch (type) {
        case MarginType::Circumscribed: b.edge_sigma = rng.uniform(0.6, 0.9); break;
        case MarginType::Indistinct: b.edge_sigma = rng.uniform(3.5, 5.0); break;
        case MarginType::Spiculated: {
            b.edge_sigma = rng.uniform(0.7, 1.0);
            const int n_spikes = 9 + static_cast<int>(rng.uniform_int(6));
            for (int i = 0; i < n_spikes; ++i) {
                b.spike_theta.push_back(rng.uniform(0.0, 6.283185307179586));
                b.spike_amp.push_back(b.r0 * rng.uniform(0.28, 0.40));
                b.spike_sigma.push_back(rng.uniform(0.05, 0.09));
            }
            break;
        }
    }
    return b;
}

inline Image background_texture(const GeneratorConfig& cfg, Rng& rng) {
    Image noise(cfg.image_h, cfg.image_w);
    for (auto& v : noise.pix) v = rng.uniform01();
    Image smooth = box_blur(noise, 2);
    for (auto& v : smooth.pix) v = 0.30 + 0.14 * (v - 0.5);
    return smooth;
}

inline double worst_case_extent(const GeneratorConfig& cfg) {
    const double m = std::min(cfg.image_h, cfg.image_w);
    // r0 max * (1 + smooth) + spike amp max, plus center jitter and fine band
    return m * 0.19 * (1.0 + 3 * 0.05 + 0.40) + 0.02 * m + cfg.context_margin_px + 2.5;
}

}  // namespace detail

inline constexpr double kFineBandHalfwidth = 2.0;
inline constexpr int kConfounderTagSize = 6;
inline constexpr double kMalignancyRate[kNumMarginTypes] = {0.05, 0.4, 0.9};

// Deterministic generation: one RNG stream, fixed draw order per sample.
inline Dataset generate(const GeneratorConfig& cfg) {
    if (cfg.n_per_type < 1) throw ConfigError("generate: n_per_type must be >= 1");
    if (cfg.fine_fraction < 0.0 || cfg.fine_fraction > 1.0)
        throw ConfigError("generate: fine_fraction must lie in [0,1]");
    if (cfg.train_frac < 0.0 || cfg.val_frac < 0.0 || cfg.train_frac + cfg.val_frac > 1.0)
        throw ConfigError("generate: invalid split fractions");
    const double half = std::min(cfg.image_h, cfg.image_w) / 2.0 - 1.0;
    if (detail::worst_case_extent(cfg) > half)
        throw ConfigError("generate: image too small for blob plus context margin");

    Rng rng(cfg.seed);
    Dataset ds;
    ds.config = cfg;

    const char* prefix[kNumMarginTypes] = {"circ", "indi", "spic"};
    const int n_fine = static_cast<int>(std::ceil(cfg.fine_fraction * cfg.n_per_type));

    for (int t = 0; t < kNumMarginTypes; ++t) {
        const auto type = static_cast<MarginType>(t);
        for (int i = 0; i < cfg.n_per_type; ++i) {
            Sample s;
            char idbuf[32];
            std::snprintf(idbuf, sizeof idbuf, "%s_%04d", prefix[t], i);
            s.id = idbuf;
            s.margin = type;

            const auto blob = detail::draw_blob(type, cfg, rng);
            Image bg = detail::background_texture(cfg, rng);
            s.malignancy = rng.bernoulli(kMalignancyRate[t]) ? 1 : 0;

            Image img(cfg.image_h, cfg.image_w);
            Image blob_region(cfg.image_h, cfg.image_w, 0.0);   // 1 = inside blob
            Image fine_band(cfg.image_h, cfg.image_w, 0.0);     // 1 = relevant band
            for (int y = 0; y < cfg.image_h; ++y) {
                for (int x = 0; x < cfg.image_w; ++x) {
                    const double dy = y - blob.cy, dx = x - blob.cx;
                    const double r = std::hypot(dy, dx);
                    const double theta = std::atan2(dy, dx);
                    const double rho = blob.radius(theta);
                    const double d = r - rho;
                    const double coverage = 1.0 / (1.0 + std::exp(d / blob.edge_sigma));
                    img.at(y, x) = bg.at(y, x) + (blob.interior - bg.at(y, x)) * coverage;
                    if (d <= 0.0) blob_region.at(y, x) = 1.0;
                    if (std::abs(d) <= kFineBandHalfwidth) fine_band.at(y, x) = 1.0;
                    if (type == MarginType::Spiculated && d <= 0.0 &&
                        r >= blob.radius_smooth(theta) - kFineBandHalfwidth)
                        fine_band.at(y, x) = 1.0;  // spike interiors count as margin
                }
            }

            if (cfg.confounder_strength > 0.0) {
                const bool aligned = rng.bernoulli(cfg.confounder_strength);
                const int corner =
                    aligned ? t : static_cast<int>(rng.uniform_int(4));
                const int inset = 2;
                const int y0 = (corner == 0 || corner == 1) ? inset
                                                            : cfg.image_h - inset - kConfounderTagSize;
                const int x0 = (corner == 0 || corner == 2) ? inset
                                                            : cfg.image_w - inset - kConfounderTagSize;
                for (int y = y0; y < y0 + kConfounderTagSize; ++y)
                    for (int x = x0; x < x0 + kConfounderTagSize; ++x) img.at(y, x) = 0.95;
            }

            quantize_to_8bit(img);
            s.image = std::move(img);

            Image relevant = dilate(blob_region, cfg.context_margin_px);
            s.lesion_mask = Image(cfg.image_h, cfg.image_w);
            for (std::size_t p = 0; p < relevant.size(); ++p)
                s.lesion_mask.pix[p] = relevant.pix[p] > 0.5 ? 0.0 : 1.0;

            if (i < n_fine) {
                Image fm(cfg.image_h, cfg.image_w);
                for (std::size_t p = 0; p < fine_band.size(); ++p)
                    fm.pix[p] = fine_band.pix[p] > 0.5 ? 0.0 : 1.0;
                s.fine_mask = std::move(fm);
            }
            ds.samples.push_back(std::move(s));
        }

        // split assignment within the type
        std::vector<int> order(cfg.n_per_type);
        for (int i = 0; i < cfg.n_per_type; ++i) order[i] = i;
        shuffle(order, rng);
        const int n_train = static_cast<int>(std::llround(cfg.train_frac * cfg.n_per_type));
        const int n_val = static_cast<int>(std::llround(cfg.val_frac * cfg.n_per_type));
        const int base = t * cfg.n_per_type;
        for (int i = 0; i < cfg.n_per_type; ++i) {
            Split sp = Split::Test;
            if (i < n_train) sp = Split::Train;
            else if (i < n_train + n_val) sp = Split::Validation;
            ds.samples[base + order[i]].split = sp;
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// augmentation: random flips, rotation, 80% crop rescaled back
// ---------------------------------------------------------------------------

struct AugmentDraw {
    bool flip_h = false;
    bool flip_v = false;
    double angle_deg = 0.0;
    bool do_crop = true;    // test hook: identity transform when disabled
    double crop_fy = 0.5;   // fractional position of the crop window in the slack
    double crop_fx = 0.5;
};

inline constexpr double kCropScale = 0.8;

inline AugmentDraw draw_augment(Rng& rng) {
    AugmentDraw d;
    d.flip_h = rng.bernoulli(0.5);
    d.flip_v = rng.bernoulli(0.5);
    d.angle_deg = rng.uniform(-180.0, 180.0);
    d.do_crop = true;
    d.crop_fy = rng.uniform01();
    d.crop_fx = rng.uniform01();
    return d;
}

namespace detail {

inline Image transform_plane(const Image& im, const AugmentDraw& d, double fill) {
    Image out = im;
    if (d.flip_h) out = flip_horizontal(out);
    if (d.flip_v) out = flip_vertical(out);
    if (d.angle_deg != 0.0) out = rotate(out, d.angle_deg, fill);
    if (d.do_crop) {
        const int ch = static_cast<int>(std::lround(kCropScale * im.h));
        const int cw = static_cast<int>(std::lround(kCropScale * im.w));
        const int y0 = static_cast<int>(std::lround(d.crop_fy * (im.h - ch)));
        const int x0 = static_cast<int>(std::lround(d.crop_fx * (im.w - cw)));
        out = resize_bilinear(crop(out, y0, x0, ch, cw), im.h, im.w);
    }
    return out;
}

// Masks transform through their relevance indicator (1 = relevant) so that
// everything entering from outside the original frame lands on "irrelevant".
inline Image transform_mask(const Image& mask, const AugmentDraw& d) {
    Image rel(mask.h, mask.w);
    for (std::size_t i = 0; i < mask.size(); ++i) rel.pix[i] = 1.0 - mask.pix[i];
    Image moved = threshold_binary(transform_plane(rel, d, 0.0), 0.5);
    for (auto& v : moved.pix) v = 1.0 - v;
    return moved;
}

}  // namespace detail

inline Sample apply_augment(const Sample& in, const AugmentDraw& d) {
    Sample out = in;
    out.image = detail::transform_plane(in.image, d, 0.0);
    out.lesion_mask = detail::transform_mask(in.lesion_mask, d);
    if (in.fine_mask) out.fine_mask = detail::transform_mask(*in.fine_mask, d);
    return out;
}

inline Sample augment(const Sample& in, Rng& rng) { return apply_augment(in, draw_augment(rng)); }

// ---------------------------------------------------------------------------
// persistence: manifest.txt + PNG trees, CRC-checked
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string crc_hex(std::uint32_t crc) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08" PRIx32, crc);
    return buf;
}

inline std::vector<std::uint8_t> mask_png(const Image& mask) {
    std::vector<std::uint8_t> bytes(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) bytes[i] = mask.pix[i] > 0.5 ? 255 : 0;
    return png::encode_gray8(mask.h, mask.w, bytes);
}

inline Image mask_from_png(const png::Gray8& g) {
    Image m(g.h, g.w);
    for (std::size_t i = 0; i < m.size(); ++i) m.pix[i] = g.pixels[i] >= 128 ? 1.0 : 0.0;
    return m;
}

}  // namespace detail

inline void save(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "lesion_masks");
    bool any_fine = false;
    for (const auto& s : ds.samples) any_fine = any_fine || s.fine_mask.has_value();
    if (any_fine) fs::create_directories(fs::path(dir) / "fine_masks");

    int counts[3] = {0, 0, 0};
    for (const auto& s : ds.samples) counts[static_cast<int>(s.split)]++;

    std::ostringstream m;
    m << "protocase-dataset v1\n";
    m << "generator_seed " << ds.config.seed << "\n";
    m << "image_h " << ds.config.image_h << "\n";
    m << "image_w " << ds.config.image_w << "\n";
    m << "n_per_type " << ds.config.n_per_type << "\n";
    m << "context_margin_px " << ds.config.context_margin_px << "\n";
    m << "fine_fraction " << detail::fmt_double(ds.config.fine_fraction) << "\n";
    m << "confounder_strength " << detail::fmt_double(ds.config.confounder_strength) << "\n";
    m << "train_frac " << detail::fmt_double(ds.config.train_frac) << "\n";
    m << "val_frac " << detail::fmt_double(ds.config.val_frac) << "\n";
    m << "n_samples " << ds.samples.size() << "\n";
    m << "n_train " << counts[0] << "\n";
    m << "n_validation " << counts[1] << "\n";
    m << "n_test " << counts[2] << "\n";
    m << "columns id margin malignancy split image_crc lesion_crc fine_crc\n";

    for (const auto& s : ds.samples) {
        const auto img_png = png::encode_gray8(s.image.h, s.image.w, to_bytes(s.image));
        const auto les_png = detail::mask_png(s.lesion_mask);
        png::write_file((fs::path(dir) / "images" / (s.id + ".png")).string(), img_png);
        png::write_file((fs::path(dir) / "lesion_masks" / (s.id + ".png")).string(), les_png);
        std::string fine_crc = "-";
        if (s.fine_mask) {
            const auto fine_png = detail::mask_png(*s.fine_mask);
            png::write_file((fs::path(dir) / "fine_masks" / (s.id + ".png")).string(), fine_png);
            fine_crc = detail::crc_hex(png::crc32_of(fine_png));
        }
        m << "sample " << s.id << " " << margin_name(s.margin) << " " << s.malignancy << " "
          << split_name(s.split) << " " << detail::crc_hex(png::crc32_of(img_png)) << " "
          << detail::crc_hex(png::crc32_of(les_png)) << " " << fine_crc << "\n";
    }

    std::ofstream f(fs::path(dir) / "manifest.txt");
    if (!f) throw DataError("cannot write manifest in " + dir);
    f << m.str();
}

inline Dataset load(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream f(fs::path(dir) / "manifest.txt");
    if (!f) throw DataError("missing file: " + (fs::path(dir) / "manifest.txt").string());

    Dataset ds;
    std::string line;
    if (!std::getline(f, line) || line != "protocase-dataset v1")
        throw DataError("manifest: unrecognized header");

    std::size_t n_samples = 0;
    int counts_hdr[3] = {-1, -1, -1};
    bool in_rows = false;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (!in_rows) {
            if (key == "generator_seed") ls >> ds.config.seed;
            else if (key == "image_h") ls >> ds.config.image_h;
            else if (key == "image_w") ls >> ds.config.image_w;
            else if (key == "n_per_type") ls >> ds.config.n_per_type;
            else if (key == "context_margin_px") ls >> ds.config.context_margin_px;
            else if (key == "fine_fraction") ls >> ds.config.fine_fraction;
            else if (key == "confounder_strength") ls >> ds.config.confounder_strength;
            else if (key == "train_frac") ls >> ds.config.train_frac;
            else if (key == "val_frac") ls >> ds.config.val_frac;
            else if (key == "n_samples") ls >> n_samples;
            else if (key == "n_train") ls >> counts_hdr[0];
            else if (key == "n_validation") ls >> counts_hdr[1];
            else if (key == "n_test") ls >> counts_hdr[2];
            else if (key == "columns") in_rows = true;
            else throw DataError("manifest: unknown key '" + key + "'");
            if (ls.fail()) throw DataError("manifest: malformed value for '" + key + "'");
            continue;
        }
        if (key != "sample") throw DataError("manifest: expected sample row, got '" + key + "'");
        Sample s;
        std::string margin, split, img_crc, les_crc, fine_crc;
        ls >> s.id >> margin >> s.malignancy >> split >> img_crc >> les_crc >> fine_crc;
        if (ls.fail()) throw DataError("manifest: malformed sample row: " + line);
        s.margin = margin_from_name(margin);
        s.split = split_from_name(split);

        auto read_checked = [&](const std::string& sub, const std::string& crc) {
            const std::string path = (fs::path(dir) / sub / (s.id + ".png")).string();
            auto bytes = png::read_file(path);
            if (detail::crc_hex(png::crc32_of(bytes)) != crc)
                throw DataError("checksum mismatch: " + path);
            return png::decode_gray8(bytes, path);
        };
        const auto img = read_checked("images", img_crc);
        s.image = from_bytes(img.h, img.w, img.pixels);
        s.lesion_mask = detail::mask_from_png(read_checked("lesion_masks", les_crc));
        if (fine_crc != "-") s.fine_mask = detail::mask_from_png(read_checked("fine_masks", fine_crc));
        ds.samples.push_back(std::move(s));
    }

    if (ds.samples.size() != n_samples)
        throw DataError("manifest: sample count mismatch (header " + std::to_string(n_samples) +
                        ", rows " + std::to_string(ds.samples.size()) + ")");
    int counts[3] = {0, 0, 0};
    for (const auto& s : ds.samples) counts[static_cast<int>(s.split)]++;
    for (int i = 0; i < 3; ++i)
        if (counts_hdr[i] >= 0 && counts_hdr[i] != counts[i])
            throw DataError("manifest: per-split counts do not match header");
    return ds;
}

}  // namespace protocase
