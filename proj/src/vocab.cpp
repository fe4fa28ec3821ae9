#include "vg/vocab.hpp"

#include <fstream>

#include "vg/error.hpp"

namespace vg {

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
    tokens_ = {"<pad>", "<bos>", "<eos>"};
    tokens_.insert(tokens_.end(), words.begin(), words.end());
    for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
        if (!index_.emplace(tokens_[static_cast<std::size_t>(i)], i).second)
            throw VocabError("duplicate token '" + tokens_[static_cast<std::size_t>(i)] + "'");
    }
}

int Vocabulary::id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw VocabError("unknown token '" + token + "'");
    return it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw VocabError("unknown id " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& words) const {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(id(w));
    return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    words.reserve(ids.size());
    for (int i : ids) words.push_back(token(i));
    return words;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'");
    Vocabulary v;
    std::string line;
    int i = 0;
    while (std::getline(in, line)) {
        v.tokens_.push_back(line);
        if (!v.index_.emplace(line, i).second)
            throw FormatError("duplicate token '" + line + "' at line " + std::to_string(i + 1));
        ++i;
    }
    if (v.size() < 3 || v.tokens_[0] != "<pad>" || v.tokens_[1] != "<bos>" || v.tokens_[2] != "<eos>")
        throw FormatError("'" + path + "' does not start with the reserved tokens");
    return v;
}

std::uint64_t Vocabulary::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](char c) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    };
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (i) mix('\n');
        for (char c : tokens_[i]) mix(c);
    }
    return h;
}

}  // namespace vg
