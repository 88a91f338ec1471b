#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hat/types.hpp"

namespace hat {

enum class Split { Train, Val, Test };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

Split split_from_string(const std::string& s);

struct Point2 {
    double x = 0.0, y = 0.0;
};

// Hand-authored glyph: pen-down polylines of control points in the unit
// square (y grows downward, matching raster rows).
struct GlyphTemplate {
    int label = 0;
    std::vector<std::vector<Point2>> polylines;
};

// Ten digit-like glyphs with distinct topologies (closed loops, open curves,
// multi-stroke figures).
const std::vector<GlyphTemplate>& builtin_templates();

struct JitterParams {
    double max_rotation_deg = 15.0;
    double scale_delta = 0.2;  // scale drawn from [1-delta, 1+delta]
    double max_translation = 0.1;
    double noise_sigma = 0.01;
    double resample_jitter = 0.25;  // point budget varies by +-this fraction

    bool is_zero() const {
        return max_rotation_deg == 0.0 && scale_delta == 0.0 && max_translation == 0.0 &&
               noise_sigma == 0.0 && resample_jitter == 0.0;
    }
};

struct GenParams {
    std::size_t n_per_class = 200;
    std::uint64_t seed = 1;
    JitterParams jitter;
    std::size_t resample_points = 32;
    std::size_t image_side = 56;
    double line_width = 2.0;
    double train_frac = 0.8;
    double val_frac = 0.1;
};

struct Sample {
    int label = 0;
    Split split = Split::Train;
    StrokeSequence strokes;
    GlyphImage image;
    std::uint64_t writer_seed = 0;  // in-memory only; identifies the jitter draw

    bool has_image() const { return image.side != 0; }
};

struct Dataset {
    std::vector<Sample> samples;
    std::size_t n_classes = 0;
    std::size_t image_side = 0;  // 0 when the dataset carries no images

    std::vector<std::size_t> split_indices(Split s) const;
    bool has_images() const { return image_side != 0; }
};

// Resamples one polyline to n >= 2 points at uniform arc length.
std::vector<Point2> resample_polyline(const std::vector<Point2>& polyline, std::size_t n);

// Resamples every polyline (budget split by arc length, >= 2 points each) and
// joins them with single pen-up transition points at the gap midpoints.
StrokeSequence strokes_from_polylines(const std::vector<std::vector<Point2>>& polylines,
                                      std::size_t total_points);

// Anti-aliased rendering of the pen-down segments; background 0, ink up to 1.
// Output values are quantized to the 8-bit levels the PGM container stores,
// so rasterize -> write -> read is lossless.
GlyphImage rasterize(const StrokeSequence& strokes, std::size_t side, double line_width);

Dataset generate_dataset(std::span<const GlyphTemplate> templates, const GenParams& params);

void write_pgm(const GlyphImage& img, const std::filesystem::path& path);
GlyphImage read_pgm(const std::filesystem::path& path);

// Directory layout: manifest.jsonl + images/NNNNN.pgm. Round-trips preserve
// every coordinate and pixel bit-exactly.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace hat
