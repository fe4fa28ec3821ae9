#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace vg {

// Bijective token <-> id mapping with reserved ids for padding and the
// sequence wrappers. Serialized as one token per line, ids implicit by line
// number, reserved tokens first.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;

    // Builds from the non-reserved word list; reserved tokens are prepended.
    explicit Vocabulary(const std::vector<std::string>& words);

    int size() const { return static_cast<int>(tokens_.size()); }
    int id(const std::string& token) const;           // throws VocabError
    const std::string& token(int id) const;           // throws VocabError
    bool contains(const std::string& token) const { return index_.count(token) > 0; }

    std::vector<int> encode(const std::vector<std::string>& words) const;
    std::vector<std::string> decode(const std::vector<int>& ids) const;

    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

    // FNV-1a over the newline-joined token list; pins dataset files to the
    // vocabulary that produced them.
    std::uint64_t hash() const;

private:
    Vocabulary() = default;
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace vg
