#pragma once

// Template hint generation, parsing into word groups, and hint embedding.
//
// A hint reads "The pose is {direction} of a {color} {class}." with the
// on-top variant "The pose is on top of a {color} {class}.". Directions come
// from an 8-sector compass (+x = east, +y = north) plus "on-top" for targets
// closer than 3 m to the instance center.

#include <map>
#include <string>
#include <vector>

#include "retloc/errors.hpp"
#include "retloc/params.hpp"
#include "retloc/scene.hpp"
#include "retloc/tensor.hpp"

namespace retloc {

struct Hint {
    std::string text;
    std::vector<std::string> direction_words;
    std::vector<std::string> color_words;
    std::vector<std::string> class_words;
    int referred_instance_id = -1;
};

enum class FlipAxis { X, Y };

namespace lang {

constexpr double kOnTopDistance = 3.0;

inline const std::vector<std::string>& direction_vocab() {
    static const std::vector<std::string> v = {
        "east",      "northeast", "north", "northwest", "west",
        "southwest", "south",     "southeast", "on-top"};
    return v;
}

struct PaletteEntry {
    const char* name;
    Vec3 rgb;
};

/// Ten named colors; nearest-entry lookup is by RGB Euclidean distance.
inline const std::vector<PaletteEntry>& color_palette() {
    static const std::vector<PaletteEntry> palette = {
        {"dark-green", {0.00, 0.40, 0.00}}, {"green", {0.10, 0.70, 0.20}},
        {"gray", {0.50, 0.50, 0.50}},       {"black", {0.05, 0.05, 0.05}},
        {"white", {0.95, 0.95, 0.95}},      {"red", {0.80, 0.10, 0.10}},
        {"blue", {0.20, 0.30, 0.70}},       {"yellow", {0.90, 0.85, 0.20}},
        {"brown", {0.55, 0.27, 0.07}},      {"beige", {0.96, 0.96, 0.86}},
    };
    return palette;
}

inline const Vec3* palette_rgb(const std::string& name) {
    for (const auto& e : color_palette())
        if (name == e.name) return &e.rgb;
    return nullptr;
}

inline std::string nearest_color_name(Vec3 rgb) {
    const auto& palette = color_palette();
    std::size_t best = 0;
    double best_d = dist_rgb(rgb, palette[0].rgb);
    for (std::size_t i = 1; i < palette.size(); ++i) {
        double d = dist_rgb(rgb, palette[i].rgb);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return palette[best].name;
}

/// Compass token for the displacement target − center. Sector boundaries sit
/// at odd multiples of 22.5°; +x maps to east, +y to north.
inline std::string direction_token(double dx, double dy) {
    static const char* names[8] = {"east",  "northeast", "north", "northwest",
                                   "west",  "southwest", "south", "southeast"};
    const double deg = std::atan2(dy, dx) * 180.0 / 3.14159265358979323846;
    int idx = static_cast<int>(std::floor((deg + 22.5) / 45.0));
    idx = ((idx % 8) + 8) % 8;
    return names[idx];
}

inline std::string render_hint_text(const std::string& direction,
                                    const std::string& color,
                                    const std::string& cls) {
    const std::string dir_part =
        direction == "on-top" ? "on top" : direction;
    return "The pose is " + dir_part + " of a " + color + " " + cls + ".";
}

inline Hint generate_hint(Vec2 target, const Instance& inst) {
    const Vec2 d = target - inst.center2d();
    if (d.x == 0.0 && d.y == 0.0)
        throw UsageError("generate_hint: target coincides with instance center");
    const std::string direction =
        norm(d) < kOnTopDistance ? "on-top" : direction_token(d.x, d.y);
    const std::string color = nearest_color_name(inst.avg_color);
    const std::string cls = class_token(inst.class_label);
    Hint h;
    h.direction_words = {direction};
    h.color_words = {color};
    h.class_words = {cls};
    h.text = render_hint_text(direction, color, cls);
    h.referred_instance_id = inst.id;
    return h;
}

struct ParsedHint {
    std::vector<std::string> direction_words;
    std::vector<std::string> color_words;
    std::vector<std::string> class_words;
};

inline ParsedHint parse_hint(const std::string& text) {
    auto fail = [&](const std::string& segment) -> ParsedHint {
        throw ParseError("hint does not match template near: '" + segment + "'");
    };
    const std::string prefix = "The pose is ";
    if (text.rfind(prefix, 0) != 0) return fail(text.substr(0, prefix.size()));
    std::string rest = text.substr(prefix.size());

    std::string direction;
    const std::string on_top = "on top of a ";
    if (rest.rfind(on_top, 0) == 0) {
        direction = "on-top";
        rest = rest.substr(on_top.size());
    } else {
        auto sp = rest.find(' ');
        if (sp == std::string::npos) return fail(rest);
        direction = rest.substr(0, sp);
        bool known = false;
        for (const auto& d : direction_vocab()) known |= (d == direction);
        if (!known || direction == "on-top") return fail(direction);
        rest = rest.substr(sp + 1);
        const std::string of_a = "of a ";
        if (rest.rfind(of_a, 0) != 0) return fail(rest);
        rest = rest.substr(of_a.size());
    }

    auto sp = rest.find(' ');
    if (sp == std::string::npos) return fail(rest);
    const std::string color = rest.substr(0, sp);
    if (palette_rgb(color) == nullptr) return fail(color);
    rest = rest.substr(sp + 1);

    if (rest.empty() || rest.back() != '.') return fail(rest);
    const std::string cls = rest.substr(0, rest.size() - 1);
    bool known_class = false;
    for (const auto& c : class_vocab()) known_class |= (c == cls);
    if (!known_class) return fail(cls);

    return ParsedHint{{direction}, {color}, {cls}};
}

inline std::string flip_direction(const std::string& d, FlipAxis axis) {
    static const std::map<std::string, std::string> x_flip = {
        {"east", "west"},           {"west", "east"},
        {"northeast", "northwest"}, {"northwest", "northeast"},
        {"southeast", "southwest"}, {"southwest", "southeast"},
    };
    static const std::map<std::string, std::string> y_flip = {
        {"north", "south"},         {"south", "north"},
        {"northeast", "southeast"}, {"southeast", "northeast"},
        {"northwest", "southwest"}, {"southwest", "northwest"},
    };
    const auto& table = axis == FlipAxis::X ? x_flip : y_flip;
    auto it = table.find(d);
    return it == table.end() ? d : it->second;
}

inline Hint flip_hint(const Hint& h, FlipAxis axis) {
    Hint out = h;
    for (auto& d : out.direction_words) d = flip_direction(d, axis);
    out.text = render_hint_text(out.direction_words.at(0), out.color_words.at(0),
                                out.class_words.at(0));
    return out;
}

}  // namespace lang

/// Learned word embeddings over the closed template vocabulary. The table is
/// one parameter tensor of shape |V| × d_w; hint encoding concatenates the
/// per-group means, so the model width must be 3·d_w.
struct Vocabulary {
    std::vector<std::string> tokens;
    std::map<std::string, std::size_t> index;
    Tensor embeddings;  // |V| × d_w

    std::size_t word_dim() const { return embeddings.dim(1); }

    std::size_t lookup(const std::string& token) const {
        auto it = index.find(token);
        if (it == index.end())
            throw VocabularyError("token not in vocabulary: " + token);
        return it->second;
    }

    static std::vector<std::string> template_tokens() {
        std::vector<std::string> all;
        for (const auto& d : lang::direction_vocab()) all.push_back(d);
        for (const auto& c : lang::color_palette()) all.push_back(c.name);
        for (const auto& c : class_vocab()) all.push_back(c);
        return all;
    }

    static Vocabulary create(std::size_t d_w, Rng& rng) {
        Vocabulary v;
        v.tokens = template_tokens();
        for (std::size_t i = 0; i < v.tokens.size(); ++i) v.index[v.tokens[i]] = i;
        v.embeddings = init::normal(rng, {v.tokens.size(), d_w}, 0.1);
        return v;
    }

    /// Rebuild from a stored token list plus the embedding tensor.
    static Vocabulary from_tokens(std::vector<std::string> tokens, Tensor table) {
        Vocabulary v;
        v.tokens = std::move(tokens);
        for (std::size_t i = 0; i < v.tokens.size(); ++i) v.index[v.tokens[i]] = i;
        v.embeddings = std::move(table);
        return v;
    }
};

/// h_j = concat(mean dir embeddings, mean color embeddings, mean class
/// embeddings) ∈ R^{3·d_w}. Differentiable into the embedding table.
inline Tensor encode_hint(const Hint& hint, const Vocabulary& vocab) {
    auto group_mean = [&](const std::vector<std::string>& words) {
        if (words.empty()) throw VocabularyError("hint word group is empty");
        std::vector<std::size_t> idx;
        idx.reserve(words.size());
        for (const auto& w : words) idx.push_back(vocab.lookup(w));
        return mean_axis(gather_rows(vocab.embeddings, idx), 0);
    };
    return concat({group_mean(hint.direction_words), group_mean(hint.color_words),
                   group_mean(hint.class_words)},
                  0);
}

}  // namespace retloc
