#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace hat {

enum class Mode { Image, Stroke, Both };
enum class FusionLevel { Early, Middle };

inline const char* to_string(Mode m) {
    switch (m) {
        case Mode::Image: return "image";
        case Mode::Stroke: return "stroke";
        case Mode::Both: return "both";
    }
    return "?";
}

inline const char* to_string(FusionLevel f) {
    return f == FusionLevel::Early ? "early" : "middle";
}

inline Mode mode_from_string(const std::string& s) {
    if (s == "image") return Mode::Image;
    if (s == "stroke") return Mode::Stroke;
    if (s == "both") return Mode::Both;
    throw std::invalid_argument("unknown mode '" + s + "' (expected image|stroke|both)");
}

inline FusionLevel fusion_from_string(const std::string& s) {
    if (s == "early") return FusionLevel::Early;
    if (s == "middle") return FusionLevel::Middle;
    throw std::invalid_argument("unknown fusion level '" + s + "' (expected early|middle)");
}

// Online modality: the time-ordered pen trajectory.
struct StrokeSequence {
    struct Point {
        double x = 0.0;
        double y = 0.0;
        int pen = 1;  // 1 = pen down, 0 = pen up (travel)
    };
    std::vector<Point> points;

    std::size_t length() const { return points.size(); }
};

// Offline modality: a square single-channel raster, values in [0, 1],
// row-major with y growing downward.
struct GlyphImage {
    std::size_t side = 0;
    std::vector<double> pixels;

    double at(std::size_t row, std::size_t col) const { return pixels[row * side + col]; }
    double& at(std::size_t row, std::size_t col) { return pixels[row * side + col]; }
};

}  // namespace hat
