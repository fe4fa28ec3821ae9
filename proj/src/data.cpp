#include "vg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "vg/error.hpp"

namespace vg {

using json = nlohmann::ordered_json;

namespace {

constexpr double kMinCenterDist = 0.15;
constexpr double kBoxGap = 0.01;
constexpr double kEdgeMargin = 0.01;
constexpr double kRelMargin = 0.05;  // how far apart centers must be for a spatial relation to hold
constexpr int kPlacementBudget = 1000;
constexpr int kExpressionBudget = 60;
constexpr int kSceneBudget = 50;

const std::vector<std::string>& word_list() {
    static const std::vector<std::string> words = {
        "red", "green", "blue", "yellow", "purple",          // colors
        "square", "circle", "triangle",                      // shapes
        "small", "large",                                    // sizes
        "left", "right", "above", "below", "of",             // relations
        "largest", "smallest",                               // comparatives
    };
    return words;
}

struct Rgb {
    float r, g, b;
};

Rgb color_rgb(ColorKind c) {
    switch (c) {
        case ColorKind::red: return {1.0f, 0.0f, 0.0f};
        case ColorKind::green: return {0.0f, 1.0f, 0.0f};
        case ColorKind::blue: return {0.0f, 0.0f, 1.0f};
        case ColorKind::yellow: return {1.0f, 1.0f, 0.0f};
        case ColorKind::purple: return {0.5f, 0.0f, 0.5f};
    }
    return {0, 0, 0};
}

// ---------------------------------------------------------------------------
// Expression grammar
// ---------------------------------------------------------------------------

struct AttrPhrase {
    std::optional<SizeKind> size;
    ColorKind color{};
    ShapeKind shape{};

    std::vector<std::string> words() const {
        std::vector<std::string> out;
        if (size) out.push_back(to_string(*size));
        out.push_back(to_string(color));
        out.push_back(to_string(shape));
        return out;
    }
};

enum class RelOp { left_of, right_of, above, below };

std::vector<std::string> rel_words(RelOp op) {
    switch (op) {
        case RelOp::left_of: return {"left", "of"};
        case RelOp::right_of: return {"right", "of"};
        case RelOp::above: return {"above"};
        case RelOp::below: return {"below"};
    }
    return {};
}

struct Expr {
    enum class Kind { attr, rel, comp } kind = Kind::attr;
    AttrPhrase a, b;
    RelOp rel = RelOp::left_of;
    bool largest = true;  // comp: largest vs smallest
    ShapeKind comp_shape{};
};

bool matches(const SceneObject& o, const AttrPhrase& p) {
    return o.shape == p.shape && o.color == p.color && (!p.size || o.size == *p.size);
}

bool rel_holds(const SceneObject& a, const SceneObject& b, RelOp op) {
    switch (op) {
        case RelOp::left_of: return a.box.cx <= b.box.cx - kRelMargin;
        case RelOp::right_of: return a.box.cx >= b.box.cx + kRelMargin;
        case RelOp::above: return a.box.cy <= b.box.cy - kRelMargin;
        case RelOp::below: return a.box.cy >= b.box.cy + kRelMargin;
    }
    return false;
}

std::vector<int> eval_expr(const Expr& e, const Scene& scene) {
    const auto& objs = scene.objects;
    std::vector<int> out;
    switch (e.kind) {
        case Expr::Kind::attr:
            for (int i = 0; i < static_cast<int>(objs.size()); ++i)
                if (matches(objs[static_cast<std::size_t>(i)], e.a)) out.push_back(i);
            break;
        case Expr::Kind::rel:
            for (int i = 0; i < static_cast<int>(objs.size()); ++i) {
                if (!matches(objs[static_cast<std::size_t>(i)], e.a)) continue;
                for (int j = 0; j < static_cast<int>(objs.size()); ++j) {
                    if (j == i || !matches(objs[static_cast<std::size_t>(j)], e.b)) continue;
                    if (rel_holds(objs[static_cast<std::size_t>(i)], objs[static_cast<std::size_t>(j)], e.rel)) {
                        out.push_back(i);
                        break;
                    }
                }
            }
            break;
        case Expr::Kind::comp: {
            std::vector<int> same;
            for (int i = 0; i < static_cast<int>(objs.size()); ++i)
                if (objs[static_cast<std::size_t>(i)].shape == e.comp_shape) same.push_back(i);
            if (same.empty()) break;
            double best = objs[static_cast<std::size_t>(same[0])].box.area();
            for (int i : same) {
                const double a = objs[static_cast<std::size_t>(i)].box.area();
                best = e.largest ? std::max(best, a) : std::min(best, a);
            }
            for (int i : same)
                if (objs[static_cast<std::size_t>(i)].box.area() == best) out.push_back(i);
            break;
        }
    }
    return out;
}

std::vector<int> encode_expr(const Expr& e) {
    std::vector<std::string> words;
    switch (e.kind) {
        case Expr::Kind::attr: words = e.a.words(); break;
        case Expr::Kind::rel: {
            words = e.a.words();
            auto r = rel_words(e.rel);
            words.insert(words.end(), r.begin(), r.end());
            auto b = e.b.words();
            words.insert(words.end(), b.begin(), b.end());
            break;
        }
        case Expr::Kind::comp:
            words.push_back(e.largest ? "largest" : "smallest");
            words.push_back(to_string(e.comp_shape));
            break;
    }
    return grounding_vocabulary().encode(words);
}

// Token-sequence parser for the brute-force checker; rejects anything the
// grammar cannot produce.
Expr parse_expr(const std::vector<int>& tokens) {
    const auto& vocab = grounding_vocabulary();
    auto words = vocab.decode(tokens);
    std::size_t pos = 0;
    auto peek = [&]() -> const std::string& {
        static const std::string empty;
        return pos < words.size() ? words[pos] : empty;
    };
    auto take = [&]() -> const std::string& {
        if (pos >= words.size()) throw FormatError("expression ended early");
        return words[pos++];
    };
    auto parse_shape = [&](const std::string& w) -> ShapeKind {
        if (w == "square") return ShapeKind::square;
        if (w == "circle") return ShapeKind::circle;
        if (w == "triangle") return ShapeKind::triangle;
        throw FormatError("expected shape, got '" + w + "'");
    };
    auto parse_color = [&](const std::string& w) -> ColorKind {
        if (w == "red") return ColorKind::red;
        if (w == "green") return ColorKind::green;
        if (w == "blue") return ColorKind::blue;
        if (w == "yellow") return ColorKind::yellow;
        if (w == "purple") return ColorKind::purple;
        throw FormatError("expected color, got '" + w + "'");
    };
    auto parse_attr = [&]() -> AttrPhrase {
        AttrPhrase p;
        if (peek() == "small") {
            p.size = SizeKind::small;
            ++pos;
        } else if (peek() == "large") {
            p.size = SizeKind::large;
            ++pos;
        }
        p.color = parse_color(take());
        p.shape = parse_shape(take());
        return p;
    };

    Expr e;
    if (peek() == "largest" || peek() == "smallest") {
        e.kind = Expr::Kind::comp;
        e.largest = take() == "largest";
        e.comp_shape = parse_shape(take());
    } else {
        e.a = parse_attr();
        if (pos < words.size()) {
            e.kind = Expr::Kind::rel;
            const auto& w = take();
            if (w == "left" || w == "right") {
                if (take() != "of") throw FormatError("expected 'of' after '" + w + "'");
                e.rel = w == "left" ? RelOp::left_of : RelOp::right_of;
            } else if (w == "above") {
                e.rel = RelOp::above;
            } else if (w == "below") {
                e.rel = RelOp::below;
            } else {
                throw FormatError("expected relation, got '" + w + "'");
            }
            e.b = parse_attr();
        } else {
            e.kind = Expr::Kind::attr;
        }
    }
    if (pos != words.size()) throw FormatError("trailing tokens in expression");
    return e;
}

bool boxes_compatible(const Box& a, const Box& b) {
    const double dx = a.cx - b.cx, dy = a.cy - b.cy;
    if (dx * dx + dy * dy < kMinCenterDist * kMinCenterDist) return false;
    const bool x_gap = a.x2() + kBoxGap <= b.x1() || b.x2() + kBoxGap <= a.x1();
    const bool y_gap = a.y2() + kBoxGap <= b.y1() || b.y2() + kBoxGap <= a.y1();
    return x_gap || y_gap;
}

}  // namespace

const char* to_string(ShapeKind s) {
    switch (s) {
        case ShapeKind::square: return "square";
        case ShapeKind::circle: return "circle";
        case ShapeKind::triangle: return "triangle";
    }
    return "?";
}

const char* to_string(ColorKind c) {
    switch (c) {
        case ColorKind::red: return "red";
        case ColorKind::green: return "green";
        case ColorKind::blue: return "blue";
        case ColorKind::yellow: return "yellow";
        case ColorKind::purple: return "purple";
    }
    return "?";
}

const char* to_string(SizeKind s) { return s == SizeKind::small ? "small" : "large"; }

namespace {

ShapeKind shape_from(const std::string& s) {
    for (ShapeKind k : {ShapeKind::square, ShapeKind::circle, ShapeKind::triangle})
        if (s == to_string(k)) return k;
    throw FormatError("unknown shape '" + s + "'");
}

ColorKind color_from(const std::string& s) {
    for (ColorKind k : {ColorKind::red, ColorKind::green, ColorKind::blue, ColorKind::yellow, ColorKind::purple})
        if (s == to_string(k)) return k;
    throw FormatError("unknown color '" + s + "'");
}

SizeKind size_from(const std::string& s) {
    if (s == "small") return SizeKind::small;
    if (s == "large") return SizeKind::large;
    throw FormatError("unknown size '" + s + "'");
}

}  // namespace

bool GroundingSample::operator==(const GroundingSample& o) const {
    auto box_eq = [](const Box& a, const Box& b) {
        return a.cx == b.cx && a.cy == b.cy && a.w == b.w && a.h == b.h;
    };
    if (image != o.image || tokens != o.tokens || !box_eq(gt, o.gt)) return false;
    if (scene.target_index != o.scene.target_index || scene.objects.size() != o.scene.objects.size()) return false;
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& a = scene.objects[i];
        const auto& b = o.scene.objects[i];
        if (a.shape != b.shape || a.color != b.color || a.size != b.size || !box_eq(a.box, b.box)) return false;
    }
    return true;
}

const Vocabulary& grounding_vocabulary() {
    static const Vocabulary vocab(word_list());
    return vocab;
}

Scene generate_scene_rng(Rng& rng) {
    Scene scene;
    const int count = rng.uniform_int(2, 5);
    int attempts = 0;
    for (int i = 0; i < count; ++i) {
        SceneObject obj;
        obj.shape = static_cast<ShapeKind>(rng.uniform_int(0, 2));
        obj.color = static_cast<ColorKind>(rng.uniform_int(0, 4));
        obj.size = static_cast<SizeKind>(rng.uniform_int(0, 1));
        const double side = obj.size == SizeKind::small ? rng.uniform(0.12, 0.18) : rng.uniform(0.24, 0.32);
        while (true) {
            if (++attempts > kPlacementBudget)
                throw GenerationError("scene placement budget exhausted after " +
                                      std::to_string(kPlacementBudget) + " attempts");
            const double lo = side / 2 + kEdgeMargin, hi = 1.0 - side / 2 - kEdgeMargin;
            obj.box = Box{rng.uniform(lo, hi), rng.uniform(lo, hi), side, side};
            bool ok = true;
            for (const auto& placed : scene.objects)
                if (!boxes_compatible(obj.box, placed.box)) {
                    ok = false;
                    break;
                }
            if (ok) break;
        }
        scene.objects.push_back(obj);
    }
    scene.target_index = rng.uniform_int(0, count - 1);
    // half the scenes get a lookalike of the target, so attribute phrases
    // alone often cannot disambiguate and relational forms get exercised
    if (count >= 2 && rng.bernoulli(0.5)) {
        int twin = rng.uniform_int(0, count - 2);
        if (twin >= scene.target_index) ++twin;
        auto& t = scene.objects[static_cast<std::size_t>(scene.target_index)];
        auto& o = scene.objects[static_cast<std::size_t>(twin)];
        o.shape = t.shape;
        o.color = t.color;
    }
    return scene;
}

Scene generate_scene(std::uint64_t seed) {
    Rng rng(seed);
    return generate_scene_rng(rng);
}

std::vector<int> matching_objects(const std::vector<int>& tokens, const Scene& scene) {
    return eval_expr(parse_expr(tokens), scene);
}

std::optional<std::pair<std::vector<int>, int>> generate_expression(const Scene& scene, Rng& rng) {
    const int target = scene.target_index;
    const auto& objs = scene.objects;
    const auto& t = objs[static_cast<std::size_t>(target)];

    auto unique_for_target = [&](const Expr& e) {
        const auto m = eval_expr(e, scene);
        return m.size() == 1 && m[0] == target;
    };

    // attribute phrases first
    Expr short_attr;
    short_attr.a = AttrPhrase{std::nullopt, t.color, t.shape};
    Expr sized_attr;
    sized_attr.a = AttrPhrase{t.size, t.color, t.shape};
    std::vector<const Expr*> attr_ok;
    if (unique_for_target(short_attr)) attr_ok.push_back(&short_attr);
    if (unique_for_target(sized_attr)) attr_ok.push_back(&sized_attr);
    if (!attr_ok.empty()) {
        const Expr* pick = attr_ok[0];
        if (attr_ok.size() == 2) pick = attr_ok[rng.bernoulli(0.75) ? 0 : 1];
        return std::make_pair(encode_expr(*pick), target);
    }

    // relational / comparative fallback
    for (int attempt = 0; attempt < kExpressionBudget; ++attempt) {
        if (rng.bernoulli(0.25)) {
            Expr e;
            e.kind = Expr::Kind::comp;
            e.comp_shape = t.shape;
            e.largest = rng.bernoulli(0.5);
            int shape_count = 0;
            for (const auto& o : objs)
                if (o.shape == t.shape) ++shape_count;
            if (shape_count >= 2 && unique_for_target(e)) return std::make_pair(encode_expr(e), target);
            continue;
        }
        Expr e;
        e.kind = Expr::Kind::rel;
        e.rel = static_cast<RelOp>(rng.uniform_int(0, 3));
        int anchor = rng.uniform_int(0, static_cast<int>(objs.size()) - 2);
        if (anchor >= target) ++anchor;
        const auto& a = objs[static_cast<std::size_t>(anchor)];
        e.a = AttrPhrase{rng.bernoulli(0.4) ? std::optional<SizeKind>(t.size) : std::nullopt, t.color, t.shape};
        e.b = AttrPhrase{rng.bernoulli(0.4) ? std::optional<SizeKind>(a.size) : std::nullopt, a.color, a.shape};
        if (unique_for_target(e)) return std::make_pair(encode_expr(e), target);
    }
    return std::nullopt;
}

std::vector<float> render(const Scene& scene) {
    constexpr int S = kImageSize;
    std::vector<float> image(static_cast<std::size_t>(3) * S * S, 0.5f);
    for (const auto& obj : scene.objects) {
        const Rgb rgb = color_rgb(obj.color);
        const Box& b = obj.box;
        const int px0 = std::max(0, static_cast<int>(std::floor(b.x1() * S)));
        const int px1 = std::min(S - 1, static_cast<int>(std::ceil(b.x2() * S)));
        const int py0 = std::max(0, static_cast<int>(std::floor(b.y1() * S)));
        const int py1 = std::min(S - 1, static_cast<int>(std::ceil(b.y2() * S)));
        for (int py = py0; py <= py1; ++py) {
            const double y = (py + 0.5) / S;
            for (int px = px0; px <= px1; ++px) {
                const double x = (px + 0.5) / S;
                bool inside = false;
                switch (obj.shape) {
                    case ShapeKind::square:
                        inside = std::abs(x - b.cx) <= b.w / 2 && std::abs(y - b.cy) <= b.h / 2;
                        break;
                    case ShapeKind::circle: {
                        const double dx = x - b.cx, dy = y - b.cy;
                        inside = dx * dx + dy * dy <= (b.w / 2) * (b.w / 2);
                        break;
                    }
                    case ShapeKind::triangle: {
                        // apex at top-center, base along the bottom edge
                        const double rel_y = y - b.y1();
                        inside = rel_y >= 0 && y <= b.y2() && std::abs(x - b.cx) <= (b.w / 2) * (rel_y / b.h);
                        break;
                    }
                }
                if (inside) {
                    const std::size_t at = static_cast<std::size_t>(py) * S + px;
                    image[at] = rgb.r;
                    image[static_cast<std::size_t>(S) * S + at] = rgb.g;
                    image[2 * static_cast<std::size_t>(S) * S + at] = rgb.b;
                }
            }
        }
    }
    return image;
}

std::vector<std::uint8_t> quantize_image(const std::vector<float>& image) {
    std::vector<std::uint8_t> out(image.size());
    for (std::size_t i = 0; i < image.size(); ++i)
        out[i] = static_cast<std::uint8_t>(std::lround(image[i] * 255.0f));
    return out;
}

std::vector<float> dequantize_image(const std::vector<std::uint8_t>& image) {
    std::vector<float> out(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) out[i] = static_cast<float>(image[i]) / 255.0f;
    return out;
}

GroundingSample generate_sample(std::uint64_t seed) {
    Rng rng(seed);
    for (int attempt = 0; attempt < kSceneBudget; ++attempt) {
        Scene scene = generate_scene_rng(rng);
        auto expr = generate_expression(scene, rng);
        if (!expr) continue;
        GroundingSample s;
        s.scene = scene;
        s.tokens = expr->first;
        s.gt = scene.objects[static_cast<std::size_t>(expr->second)].box;
        s.image = quantize_image(render(scene));
        return s;
    }
    throw GenerationError("no unambiguous sample for seed " + std::to_string(seed));
}

namespace {

std::string hash_hex(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

json scene_to_json(const Scene& scene) {
    json objs = json::array();
    for (const auto& o : scene.objects)
        objs.push_back({{"shape", to_string(o.shape)},
                        {"color", to_string(o.color)},
                        {"size", to_string(o.size)},
                        {"box", {o.box.cx, o.box.cy, o.box.w, o.box.h}}});
    return {{"objects", objs}, {"target", scene.target_index}};
}

Scene scene_from_json(const json& j) {
    Scene scene;
    for (const auto& jo : j.at("objects")) {
        SceneObject o;
        o.shape = shape_from(jo.at("shape").get<std::string>());
        o.color = color_from(jo.at("color").get<std::string>());
        o.size = size_from(jo.at("size").get<std::string>());
        const auto& b = jo.at("box");
        o.box = Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
        scene.objects.push_back(o);
    }
    scene.target_index = j.at("target").get<int>();
    return scene;
}

}  // namespace

void write_dataset(int n, std::uint64_t seed, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    json header = {{"version", 1},
                   {"seed", seed},
                   {"count", n},
                   {"vocab_hash", hash_hex(grounding_vocabulary().hash())}};
    out << header.dump() << '\n';
    for (int i = 0; i < n; ++i) {
        GroundingSample s = generate_sample(seed + static_cast<std::uint64_t>(i));
        constexpr int S = kImageSize;
        json img = json::array();
        for (int c = 0; c < 3; ++c) {
            json plane = json::array();
            for (int y = 0; y < S; ++y) {
                json row = json::array();
                for (int x = 0; x < S; ++x)
                    row.push_back(static_cast<int>(s.image[(static_cast<std::size_t>(c) * S + y) * S + x]));
                plane.push_back(std::move(row));
            }
            img.push_back(std::move(plane));
        }
        json line = {{"image", std::move(img)},
                     {"tokens", s.tokens},
                     {"box", {s.gt.cx, s.gt.cy, s.gt.w, s.gt.h}},
                     {"scene", scene_to_json(s.scene)}};
        out << line.dump() << '\n';
    }
    if (!out) throw FormatError("write to '" + path + "' failed");
}

std::vector<GroundingSample> load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'");
    std::string line;
    int line_no = 0;
    auto parse_line = [&](const std::string& text) {
        try {
            return json::parse(text);
        } catch (const json::exception& e) {
            throw FormatError("'" + path + "' line " + std::to_string(line_no) + ": " + e.what());
        }
    };

    if (!std::getline(in, line)) throw FormatError("'" + path + "' line 1: missing header");
    ++line_no;
    json header = parse_line(line);
    int expected = 0;
    try {
        if (header.at("version").get<int>() != 1)
            throw FormatError("'" + path + "' line 1: unsupported version");
        if (header.at("vocab_hash").get<std::string>() != hash_hex(grounding_vocabulary().hash()))
            throw FormatError("'" + path + "' line 1: vocabulary hash mismatch");
        expected = header.at("count").get<int>();
    } catch (const json::exception& e) {
        throw FormatError("'" + path + "' line 1: " + e.what());
    }

    std::vector<GroundingSample> samples;
    samples.reserve(static_cast<std::size_t>(expected));
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = parse_line(line);
        try {
            GroundingSample s;
            constexpr int S = kImageSize;
            const auto& img = j.at("image");
            if (img.size() != 3) throw FormatError("'" + path + "' line " + std::to_string(line_no) + ": bad image");
            s.image.resize(static_cast<std::size_t>(3) * S * S);
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < S; ++y) {
                    const auto& row = img.at(static_cast<std::size_t>(c)).at(static_cast<std::size_t>(y));
                    for (int x = 0; x < S; ++x) {
                        const int v = row.at(static_cast<std::size_t>(x)).get<int>();
                        if (v < 0 || v > 255)
                            throw FormatError("'" + path + "' line " + std::to_string(line_no) +
                                              ": pixel out of range");
                        s.image[(static_cast<std::size_t>(c) * S + y) * S + x] = static_cast<std::uint8_t>(v);
                    }
                }
            s.tokens = j.at("tokens").get<std::vector<int>>();
            const auto& b = j.at("box");
            s.gt = Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
            s.scene = scene_from_json(j.at("scene"));
            samples.push_back(std::move(s));
        } catch (const json::exception& e) {
            throw FormatError("'" + path + "' line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (static_cast<int>(samples.size()) != expected)
        throw FormatError("'" + path + "': header promises " + std::to_string(expected) + " samples, found " +
                          std::to_string(samples.size()));
    return samples;
}

Box oracle_box(const GroundingSample& sample) {
    const auto m = matching_objects(sample.tokens, sample.scene);
    if (m.size() != 1)
        throw ContractError("expression denotes " + std::to_string(m.size()) + " objects, expected 1");
    return sample.scene.objects[static_cast<std::size_t>(m[0])].box;
}

}  // namespace vg
