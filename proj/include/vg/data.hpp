#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vg/boxes.hpp"
#include "vg/rng.hpp"
#include "vg/vocab.hpp"

namespace vg {

constexpr int kImageSize = 64;

enum class ShapeKind { square, circle, triangle };
enum class ColorKind { red, green, blue, yellow, purple };
enum class SizeKind { small, large };

const char* to_string(ShapeKind s);
const char* to_string(ColorKind c);
const char* to_string(SizeKind s);

struct SceneObject {
    ShapeKind shape{};
    ColorKind color{};
    SizeKind size{};
    Box box;
};

// 2-5 objects with pairwise center distance >= 0.15, disjoint boxes, every
// box fully inside the unit image.
struct Scene {
    std::vector<SceneObject> objects;
    int target_index = -1;
};

struct GroundingSample {
    std::vector<std::uint8_t> image;  // [3 x 64 x 64], channel-major, 0-255
    std::vector<int> tokens;          // expression ids, no BOS/EOS
    Box gt;
    Scene scene;

    bool operator==(const GroundingSample& o) const;
};

// The fixed grammar vocabulary (reserved tokens first).
const Vocabulary& grounding_vocabulary();

// Deterministic in the seed; throws GenerationError after 1000 placement
// rejections (practically unreachable at 2-5 objects).
Scene generate_scene(std::uint64_t seed);
Scene generate_scene_rng(Rng& rng);

// Samples grammar productions for the scene's target and brute-force-checks
// uniqueness against every object; relational/comparative forms are used when
// attributes alone are ambiguous. nullopt when the retry budget is exhausted
// (caller regenerates the scene).
std::optional<std::pair<std::vector<int>, int>> generate_expression(const Scene& scene, Rng& rng);

// Formal expression semantics: indices of every object the token sequence
// denotes. The uniqueness oracle and the evaluation ceiling both build on
// this.
std::vector<int> matching_objects(const std::vector<int>& tokens, const Scene& scene);

// Rasterizes in object order onto gray (0.5, 0.5, 0.5); no anti-aliasing.
// Triangles are upward axis-aligned isoceles inscribed in their box.
std::vector<float> render(const Scene& scene);

std::vector<std::uint8_t> quantize_image(const std::vector<float>& image);
std::vector<float> dequantize_image(const std::vector<std::uint8_t>& image);

GroundingSample generate_sample(std::uint64_t seed);

// JSON Lines with a header line carrying {version, seed, count, vocab_hash};
// per-sample seeds are seed + index, so files are a pure function of
// (n, seed, grammar version).
void write_dataset(int n, std::uint64_t seed, const std::string& path);
std::vector<GroundingSample> load_dataset(const std::string& path);

// Symbolic reference solver: parses the expression and reads the scene
// metadata. Throws ContractError if the expression is not unique.
Box oracle_box(const GroundingSample& sample);

}  // namespace vg
