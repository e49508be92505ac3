#pragma once

#include <cmath>

namespace retloc {

struct Vec2 {
    double x = 0.0, y = 0.0;
};

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(Vec2 a, double s) { return {a.x * s, a.y * s}; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }
inline double dist(Vec2 a, Vec2 b) { return norm(a - b); }

inline double dist_rgb(Vec3 a, Vec3 b) {
    const double dr = a.x - b.x, dg = a.y - b.y, db = a.z - b.z;
    return std::sqrt(dr * dr + dg * dg + db * db);
}

/// One point of a scene instance: position in meters, color in [0,1].
struct ScenePoint {
    double x = 0.0, y = 0.0, z = 0.0;
    double r = 0.0, g = 0.0, b = 0.0;
};

}  // namespace retloc
