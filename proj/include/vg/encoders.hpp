#pragma once

#include <vector>

#include "vg/nn.hpp"
#include "vg/vocab.hpp"

namespace vg {

// Visual feature map over an HxW grid of cells, stored cell-major as
// [H*W, C] with cell index y*W + x.
template <typename T>
struct FeatureMap {
    int channels = 0, height = 0, width = 0;
    Tensor<T> values;
};

// Encoded text sequence, [L, C]; L always includes the BOS and EOS wrappers.
template <typename T>
struct TextEmbeddings {
    int channels = 0, length = 0;
    Tensor<T> values;
};

// Splits an image [3 x S x S] (channel-major, row-major pixels) into
// non-overlapping patch vectors ordered (c, py, px), one row per grid cell.
template <typename T>
std::vector<T> extract_patches(const std::vector<T>& image, int image_size, int patch) {
    const int grid = image_size / patch;
    std::vector<T> out(static_cast<std::size_t>(grid) * grid * 3 * patch * patch);
    std::size_t w = 0;
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx)
            for (int c = 0; c < 3; ++c)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        out[w++] = image[(static_cast<std::size_t>(c) * image_size + gy * patch + py) * image_size +
                                         gx * patch + px];
    return out;
}

// Patch embedding + absolute 2-D sinusoidal positions + a small stack of
// transformer encoder layers.
template <typename T>
class VisualEncoder {
public:
    VisualEncoder() = default;
    VisualEncoder(int image_size, int patch, int channels, int heads, int ffn_hidden, int depth, Rng& rng)
        : image_size_(image_size), patch_(patch), channels_(channels) {
        if (patch <= 0 || image_size % patch != 0)
            throw ConfigError("image size " + std::to_string(image_size) + " not divisible by patch " +
                              std::to_string(patch));
        grid_ = image_size / patch;
        patch_proj = Linear<T>(3 * patch * patch, channels, rng);
        pos = sinusoidal_grid_2d<T>(grid_, grid_, channels);
        layers.reserve(static_cast<std::size_t>(depth));
        for (int i = 0; i < depth; ++i) layers.emplace_back(channels, heads, ffn_hidden, rng);
    }

    FeatureMap<T> forward(Tape<T>& tp, const std::vector<T>& image) const {
        if (image.size() != static_cast<std::size_t>(3) * image_size_ * image_size_)
            throw DimError("encode_image: expected 3x" + std::to_string(image_size_) + "x" +
                           std::to_string(image_size_) + " image, got " + std::to_string(image.size()) +
                           " values");
        auto patches = Tensor<T>::leaf({grid_ * grid_, 3 * patch_ * patch_},
                                       extract_patches(image, image_size_, patch_));
        auto x = add(tp, patch_proj.forward(tp, patches), pos);
        for (const auto& layer : layers) x = layer.forward(tp, x);
        return {channels_, grid_, grid_, x};
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        patch_proj.collect(prefix + ".patch_proj", out);
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].collect(prefix + ".layer" + std::to_string(i), out);
    }

    int grid() const { return grid_; }
    int image_size() const { return image_size_; }
    int patch() const { return patch_; }

    Linear<T> patch_proj;
    std::vector<EncoderLayer<T>> layers;
    Tensor<T> pos;  // [grid*grid, C], constant

private:
    int image_size_ = 0, patch_ = 0, channels_ = 0, grid_ = 0;
};

// Learned token embeddings + 1-D sinusoidal positions + encoder layers.
// Wraps every sequence in BOS/EOS.
template <typename T>
class TextEncoder {
public:
    TextEncoder() = default;
    TextEncoder(int vocab_size, int channels, int heads, int ffn_hidden, int depth, int max_expr_len, Rng& rng)
        : vocab_size_(vocab_size), channels_(channels), max_expr_len_(max_expr_len) {
        embedding = Tensor<T>::leaf({vocab_size, channels},
                                    xavier_uniform<T>(static_cast<std::size_t>(vocab_size) * channels,
                                                      vocab_size, channels, rng),
                                    true);
        layers.reserve(static_cast<std::size_t>(depth));
        for (int i = 0; i < depth; ++i) layers.emplace_back(channels, heads, ffn_hidden, rng);
    }

    TextEmbeddings<T> forward(Tape<T>& tp, const std::vector<int>& tokens) const {
        if (static_cast<int>(tokens.size()) > max_expr_len_)
            throw LengthError("expression of " + std::to_string(tokens.size()) + " tokens exceeds maximum " +
                              std::to_string(max_expr_len_));
        for (int t : tokens)
            if (t < 0 || t >= vocab_size_) throw VocabError("unknown id " + std::to_string(t));
        std::vector<int> wrapped;
        wrapped.reserve(tokens.size() + 2);
        wrapped.push_back(Vocabulary::kBos);
        wrapped.insert(wrapped.end(), tokens.begin(), tokens.end());
        wrapped.push_back(Vocabulary::kEos);
        const int L = static_cast<int>(wrapped.size());
        auto x = add(tp, gather_rows(tp, embedding, wrapped), sinusoidal_rows_1d<T>(L, channels_));
        for (const auto& layer : layers) x = layer.forward(tp, x);
        return {channels_, L, x};
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".embedding", embedding});
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].collect(prefix + ".layer" + std::to_string(i), out);
    }

    int max_expr_len() const { return max_expr_len_; }

    Tensor<T> embedding;  // [V, C]
    std::vector<EncoderLayer<T>> layers;

private:
    int vocab_size_ = 0, channels_ = 0, max_expr_len_ = 0;
};

}  // namespace vg
