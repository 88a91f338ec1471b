#include "hat/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "hat/rng.hpp"

namespace hat {

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw std::invalid_argument("unknown split '" + s + "' (expected train|val|test)");
}

std::vector<std::size_t> Dataset::split_indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].split == s) out.push_back(i);
    return out;
}

// ---------------------------------------------------------------------------
// built-in glyph templates

const std::vector<GlyphTemplate>& builtin_templates() {
    static const std::vector<GlyphTemplate> templates = [] {
        std::vector<GlyphTemplate> t;
        // 0: closed oval
        t.push_back({0,
                     {{{0.5, 0.2},    {0.605, 0.2402}, {0.6819, 0.35}, {0.71, 0.5},  {0.6819, 0.65},
                       {0.605, 0.7598}, {0.5, 0.8},    {0.395, 0.7598}, {0.3181, 0.65}, {0.29, 0.5},
                       {0.3181, 0.35}, {0.395, 0.2402}, {0.5, 0.2}}}});
        // 1: serif plus downstroke
        t.push_back({1, {{{0.38, 0.30}, {0.52, 0.18}, {0.52, 0.82}}}});
        // 2: open top arc into a diagonal and base bar
        t.push_back({2,
                     {{{0.30, 0.32}, {0.34, 0.22}, {0.50, 0.18}, {0.66, 0.22}, {0.70, 0.34},
                       {0.62, 0.48}, {0.42, 0.62}, {0.30, 0.80}, {0.72, 0.80}}}});
        // 3: double arc
        t.push_back({3,
                     {{{0.32, 0.24}, {0.44, 0.17}, {0.58, 0.19}, {0.66, 0.30}, {0.60, 0.42},
                       {0.48, 0.47}, {0.62, 0.52}, {0.68, 0.64}, {0.60, 0.78}, {0.44, 0.83},
                       {0.32, 0.76}}}});
        // 4: two strokes
        t.push_back({4, {{{0.58, 0.16}, {0.27, 0.60}, {0.76, 0.60}}, {{0.62, 0.34}, {0.62, 0.84}}}});
        // 5: cap, spine and bowl
        t.push_back({5,
                     {{{0.68, 0.18}, {0.36, 0.18}, {0.33, 0.46}, {0.48, 0.42}, {0.63, 0.48},
                       {0.68, 0.62}, {0.60, 0.77}, {0.44, 0.82}, {0.33, 0.74}}}});
        // 6: descending curl into a closed bowl
        t.push_back({6,
                     {{{0.62, 0.17}, {0.48, 0.26}, {0.38, 0.42}, {0.34, 0.60}, {0.40, 0.76},
                       {0.54, 0.82}, {0.65, 0.73}, {0.65, 0.58}, {0.54, 0.50}, {0.40, 0.56}}}});
        // 7: cap and diagonal, plus crossbar
        t.push_back({7, {{{0.30, 0.19}, {0.71, 0.19}, {0.44, 0.83}}, {{0.36, 0.50}, {0.62, 0.50}}}});
        // 8: crossing double loop
        t.push_back({8,
                     {{{0.50, 0.18}, {0.63, 0.25}, {0.61, 0.39}, {0.50, 0.47}, {0.37, 0.56},
                       {0.35, 0.71}, {0.50, 0.82}, {0.65, 0.71}, {0.63, 0.56}, {0.50, 0.47},
                       {0.39, 0.39}, {0.37, 0.25}, {0.50, 0.18}}}});
        // 9: closed bowl with a tail
        t.push_back({9,
                     {{{0.64, 0.33}, {0.54, 0.22}, {0.40, 0.25}, {0.34, 0.38}, {0.40, 0.50},
                       {0.54, 0.53}, {0.64, 0.44}, {0.64, 0.33}, {0.64, 0.60}, {0.56, 0.84}}}});
        return t;
    }();
    return templates;
}

// ---------------------------------------------------------------------------
// resampling and joining

namespace {

double polyline_length(const std::vector<Point2>& pts) {
    double len = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i)
        len += std::hypot(pts[i].x - pts[i - 1].x, pts[i].y - pts[i - 1].y);
    return len;
}

std::vector<std::vector<Point2>> resample_polylines(const std::vector<std::vector<Point2>>& polys,
                                                    std::size_t total_points) {
    std::vector<double> lengths(polys.size());
    double total_len = 0.0;
    for (std::size_t k = 0; k < polys.size(); ++k) {
        lengths[k] = polyline_length(polys[k]);
        total_len += lengths[k];
    }
    std::vector<std::vector<Point2>> out;
    out.reserve(polys.size());
    for (std::size_t k = 0; k < polys.size(); ++k) {
        std::size_t n = 2;
        if (total_len > 0.0)
            n = std::max<std::size_t>(2, static_cast<std::size_t>(std::llround(
                                             static_cast<double>(total_points) * lengths[k] / total_len)));
        out.push_back(resample_polyline(polys[k], n));
    }
    return out;
}

StrokeSequence join_polylines(const std::vector<std::vector<Point2>>& polys) {
    StrokeSequence s;
    for (std::size_t k = 0; k < polys.size(); ++k) {
        if (k > 0) {
            // pen-up travel point midway across the gap
            const Point2& prev = polys[k - 1].back();
            const Point2& next = polys[k].front();
            s.points.push_back({0.5 * (prev.x + next.x), 0.5 * (prev.y + next.y), 0});
        }
        for (const Point2& p : polys[k]) s.points.push_back({p.x, p.y, 1});
    }
    return s;
}

}  // namespace

std::vector<Point2> resample_polyline(const std::vector<Point2>& polyline, std::size_t n) {
    if (polyline.empty()) throw std::invalid_argument("resample_polyline: empty polyline");
    if (n < 2) n = 2;
    std::vector<double> cum(polyline.size(), 0.0);
    for (std::size_t i = 1; i < polyline.size(); ++i)
        cum[i] = cum[i - 1] + std::hypot(polyline[i].x - polyline[i - 1].x, polyline[i].y - polyline[i - 1].y);
    double total = cum.back();
    std::vector<Point2> out(n);
    if (total == 0.0) {
        std::fill(out.begin(), out.end(), polyline[0]);
        return out;
    }
    std::size_t seg = 0;
    for (std::size_t j = 0; j < n; ++j) {
        double s = total * static_cast<double>(j) / static_cast<double>(n - 1);
        if (s > total) s = total;
        while (seg + 2 < polyline.size() && cum[seg + 1] < s) ++seg;
        double seg_len = cum[seg + 1] - cum[seg];
        double alpha = seg_len > 0.0 ? (s - cum[seg]) / seg_len : 0.0;
        if (alpha < 0.0) alpha = 0.0;
        if (alpha > 1.0) alpha = 1.0;
        out[j].x = polyline[seg].x + alpha * (polyline[seg + 1].x - polyline[seg].x);
        out[j].y = polyline[seg].y + alpha * (polyline[seg + 1].y - polyline[seg].y);
    }
    return out;
}

StrokeSequence strokes_from_polylines(const std::vector<std::vector<Point2>>& polylines,
                                      std::size_t total_points) {
    return join_polylines(resample_polylines(polylines, total_points));
}

// ---------------------------------------------------------------------------
// rasterization

GlyphImage rasterize(const StrokeSequence& strokes, std::size_t side, double line_width) {
    if (side < 8) throw std::invalid_argument("rasterize: side must be >= 8");
    if (line_width <= 0.0) throw std::invalid_argument("rasterize: line width must be positive");
    std::vector<double> cov(side * side, 0.0);
    const double half = 0.5 * line_width;
    const double reach = half + 1.5;

    for (std::size_t t = 0; t + 1 < strokes.points.size(); ++t) {
        const auto& a = strokes.points[t];
        const auto& b = strokes.points[t + 1];
        if (a.pen != 1 || b.pen != 1) continue;
        // pixel space
        double ax = a.x * side, ay = a.y * side;
        double bx = b.x * side, by = b.y * side;
        double dx = bx - ax, dy = by - ay;
        double len2 = dx * dx + dy * dy;

        long r0 = std::lround(std::floor(std::min(ay, by) - reach));
        long r1 = std::lround(std::ceil(std::max(ay, by) + reach));
        long c0 = std::lround(std::floor(std::min(ax, bx) - reach));
        long c1 = std::lround(std::ceil(std::max(ax, bx) + reach));
        r0 = std::max(r0, 0L);
        c0 = std::max(c0, 0L);
        r1 = std::min(r1, static_cast<long>(side) - 1);
        c1 = std::min(c1, static_cast<long>(side) - 1);

        for (long r = r0; r <= r1; ++r) {
            double py = static_cast<double>(r) + 0.5;
            for (long c = c0; c <= c1; ++c) {
                double px = static_cast<double>(c) + 0.5;
                double u = 0.0;
                if (len2 > 0.0) {
                    u = ((px - ax) * dx + (py - ay) * dy) / len2;
                    u = std::clamp(u, 0.0, 1.0);
                }
                double qx = ax + u * dx, qy = ay + u * dy;
                double dist = std::hypot(px - qx, py - qy);
                double ink = std::clamp(0.5 + half - dist, 0.0, 1.0);
                double& cell = cov[static_cast<std::size_t>(r) * side + static_cast<std::size_t>(c)];
                cell = std::max(cell, ink);
            }
        }
    }
    GlyphImage img;
    img.side = side;
    img.pixels.resize(side * side);
    for (std::size_t i = 0; i < cov.size(); ++i)
        img.pixels[i] = static_cast<double>(std::llround(cov[i] * 255.0)) / 255.0;
    return img;
}

// ---------------------------------------------------------------------------
// generation

Dataset generate_dataset(std::span<const GlyphTemplate> templates, const GenParams& params) {
    if (templates.empty()) throw std::invalid_argument("generate_dataset: template set is empty");
    if (params.n_per_class < 1) throw std::invalid_argument("generate_dataset: n_per_class must be >= 1");
    if (params.train_frac < 0 || params.val_frac < 0 || params.train_frac + params.val_frac > 1.0)
        throw std::invalid_argument("generate_dataset: invalid split fractions");
    for (const auto& tpl : templates) {
        if (tpl.polylines.empty())
            throw std::invalid_argument("generate_dataset: template " + std::to_string(tpl.label) +
                                        " has no polylines");
        for (const auto& poly : tpl.polylines)
            for (const Point2& p : poly)
                if (p.x < 0.0 || p.x > 1.0 || p.y < 0.0 || p.y > 1.0)
                    throw std::invalid_argument("generate_dataset: template control point outside unit square");
    }

    const JitterParams& jit = params.jitter;
    const std::size_t n_train = static_cast<std::size_t>(std::llround(params.train_frac * params.n_per_class));
    const std::size_t n_val = static_cast<std::size_t>(std::llround(params.val_frac * params.n_per_class));

    Dataset ds;
    ds.n_classes = templates.size();
    ds.image_side = params.image_side;
    ds.samples.reserve(templates.size() * params.n_per_class);

    for (std::size_t c = 0; c < templates.size(); ++c) {
        for (std::size_t j = 0; j < params.n_per_class; ++j) {
            std::uint64_t sample_seed = derive_seed(params.seed, "sample", c * params.n_per_class + j);
            Rng rng(sample_seed);

            double rot = rng.uniform(-jit.max_rotation_deg, jit.max_rotation_deg) * (3.14159265358979323846 / 180.0);
            double sc = rng.uniform(1.0 - jit.scale_delta, 1.0 + jit.scale_delta);
            double tx = rng.uniform(-jit.max_translation, jit.max_translation);
            double ty = rng.uniform(-jit.max_translation, jit.max_translation);
            std::size_t n_target = params.resample_points;
            if (jit.resample_jitter > 0.0) {
                double factor = 1.0 + rng.uniform(-jit.resample_jitter, jit.resample_jitter);
                n_target = std::max<std::size_t>(
                    4, static_cast<std::size_t>(std::llround(static_cast<double>(params.resample_points) * factor)));
            }

            std::vector<std::vector<Point2>> polys = templates[c].polylines;
            const bool affine = rot != 0.0 || sc != 1.0 || tx != 0.0 || ty != 0.0;
            if (affine) {
                double cr = std::cos(rot), sr = std::sin(rot);
                for (auto& poly : polys)
                    for (Point2& p : poly) {
                        double x = (p.x - 0.5) * sc, y = (p.y - 0.5) * sc;
                        p.x = 0.5 + x * cr - y * sr + tx;
                        p.y = 0.5 + x * sr + y * cr + ty;
                    }
            }
            auto resampled = resample_polylines(polys, n_target);
            if (jit.noise_sigma > 0.0) {
                for (auto& poly : resampled)
                    for (Point2& p : poly) {
                        p.x += jit.noise_sigma * rng.normal();
                        p.y += jit.noise_sigma * rng.normal();
                    }
            }
            for (auto& poly : resampled)
                for (Point2& p : poly) {
                    p.x = std::clamp(p.x, 0.0, 1.0);
                    p.y = std::clamp(p.y, 0.0, 1.0);
                }

            Sample s;
            s.label = templates[c].label;
            s.split = j < n_train ? Split::Train : (j < n_train + n_val ? Split::Val : Split::Test);
            s.strokes = join_polylines(resampled);
            s.image = rasterize(s.strokes, params.image_side, params.line_width);
            s.writer_seed = sample_seed;
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// PGM io

void write_pgm(const GlyphImage& img, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open image file for writing: " + path.string());
    f << "P5\n" << img.side << " " << img.side << "\n255\n";
    std::vector<unsigned char> bytes(img.pixels.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = static_cast<unsigned char>(std::llround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to image file: " + path.string());
}

GlyphImage read_pgm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open image file: " + path.string());
    std::string magic;
    std::size_t w = 0, h = 0;
    int maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (!f || magic != "P5") throw std::runtime_error("bad PGM header in: " + path.string());
    if (w != h || w == 0) throw std::runtime_error("non-square PGM in: " + path.string());
    if (maxval != 255) throw std::runtime_error("unsupported PGM maxval in: " + path.string());
    f.get();  // single whitespace after maxval
    std::vector<unsigned char> bytes(w * h);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (f.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw std::runtime_error("truncated image file: " + path.string());
    GlyphImage img;
    img.side = w;
    img.pixels.resize(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = static_cast<double>(bytes[i]) / 255.0;
    return img;
}

// ---------------------------------------------------------------------------
// dataset io

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const bool with_images = ds.has_images();
    if (with_images) fs::create_directories(dir / "images");

    std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary | std::ios::trunc);
    if (!manifest) throw std::runtime_error("cannot open manifest for writing: " + (dir / "manifest.jsonl").string());

    char num[64];
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const Sample& s = ds.samples[i];
        manifest << "{\"label\": " << s.label << ", \"split\": \"" << to_string(s.split) << "\", \"strokes\": [";
        for (std::size_t t = 0; t < s.strokes.points.size(); ++t) {
            const auto& p = s.strokes.points[t];
            if (t) manifest << ", ";
            // 17 significant digits: lossless for 64-bit floats
            std::snprintf(num, sizeof num, "[%.17g, %.17g, %d]", p.x, p.y, p.pen);
            manifest << num;
        }
        manifest << "]";
        if (s.has_image()) {
            std::snprintf(num, sizeof num, "images/%05zu.pgm", i);
            manifest << ", \"image\": \"" << num << "\"";
            write_pgm(s.image, dir / num);
        }
        manifest << "}\n";
    }
    if (!manifest) throw std::runtime_error("short write to manifest: " + (dir / "manifest.jsonl").string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const fs::path manifest_path = dir / "manifest.jsonl";
    std::ifstream manifest(manifest_path, std::ios::binary);
    if (!manifest) throw std::runtime_error("cannot open manifest: " + manifest_path.string());

    Dataset ds;
    int max_label = -1;
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& why) {
        throw std::runtime_error("manifest line " + std::to_string(line_no) + ": " + why);
    };

    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(std::string("invalid JSON: ") + e.what());
        }
        if (!j.is_object()) fail("expected a JSON object");
        for (const auto& [key, value] : j.items()) {
            (void)value;
            if (key != "label" && key != "split" && key != "strokes" && key != "image")
                fail("unknown key '" + key + "'");
        }
        if (!j.contains("label") || !j.contains("split") || !j.contains("strokes"))
            fail("missing required key (label, split, strokes)");

        Sample s;
        if (!j["label"].is_number_integer() || j["label"].get<int>() < 0) fail("label must be a nonnegative integer");
        s.label = j["label"].get<int>();
        try {
            s.split = split_from_string(j["split"].get<std::string>());
        } catch (const std::exception& e) {
            fail(e.what());
        }
        if (!j["strokes"].is_array() || j["strokes"].empty()) fail("strokes must be a nonempty array");
        for (const auto& pt : j["strokes"]) {
            if (!pt.is_array() || pt.size() != 3) fail("stroke point must be [x, y, pen]");
            double x = pt[0].get<double>(), y = pt[1].get<double>();
            if (!pt[2].is_number_integer()) fail("pen state must be an integer");
            int pen = pt[2].get<int>();
            if (pen != 0 && pen != 1) fail("pen value " + std::to_string(pen) + " outside {0,1}");
            if (!(x >= 0.0 && x <= 1.0) || !(y >= 0.0 && y <= 1.0))
                fail("coordinates outside the unit square");
            s.strokes.points.push_back({x, y, pen});
        }
        if (j.contains("image")) {
            fs::path img_path = dir / j["image"].get<std::string>();
            s.image = read_pgm(img_path);
            if (ds.image_side == 0)
                ds.image_side = s.image.side;
            else if (s.image.side != ds.image_side)
                fail("image side " + std::to_string(s.image.side) + " differs from earlier samples");
        }
        max_label = std::max(max_label, s.label);
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw std::runtime_error("manifest is empty: " + manifest_path.string());
    ds.n_classes = static_cast<std::size_t>(max_label) + 1;

    bool mixed = false;
    for (const Sample& s : ds.samples)
        if (s.has_image() != ds.samples.front().has_image()) mixed = true;
    if (mixed) throw std::runtime_error("manifest mixes image and image-less samples");

    std::set<int> train_classes, val_classes;
    for (const Sample& s : ds.samples) {
        if (s.split == Split::Train) train_classes.insert(s.label);
        if (s.split == Split::Val) val_classes.insert(s.label);
    }
    if (!train_classes.empty() && !val_classes.empty() && train_classes != val_classes)
        throw std::runtime_error("train and val splits expose different class sets");
    return ds;
}

}  // namespace hat
