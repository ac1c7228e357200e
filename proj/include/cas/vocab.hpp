#pragma once

// Byte-level vocabulary for real text (ids 0-2 reserved, 3-258 = bytes) and
// an abstract word-level mode for synthetic tasks.

#include <string>
#include <vector>

#include "cas/chunking.hpp"
#include "cas/common.hpp"

namespace cas {

class vocab {
public:
    enum class kind { byte_level, word_level };

    static vocab bytes() { return vocab(kind::byte_level, NUM_RESERVED_IDS + 256); }
    static vocab words(int n_words) {
        if (n_words < 1) throw arg_error("vocab: word vocabulary must have >= 1 entries");
        return vocab(kind::word_level, NUM_RESERVED_IDS + n_words);
    }

    kind mode() const { return mode_; }
    int size() const { return size_; }

    token_sequence encode(const std::string& text) const {
        token_sequence t;
        if (mode_ == kind::byte_level) {
            t.ids.reserve(text.size());
            for (unsigned char c : text) t.ids.push_back(NUM_RESERVED_IDS + static_cast<int>(c));
        } else {
            size_t pos = 0;
            while (pos < text.size()) {
                while (pos < text.size() && text[pos] == ' ') ++pos;
                size_t end = pos;
                while (end < text.size() && text[end] != ' ') ++end;
                if (end > pos) {
                    const std::string tok = text.substr(pos, end - pos);
                    if (tok.size() < 2 || tok[0] != 't')
                        throw data_error("vocab: cannot encode word token '" + tok + "'");
                    const int id = std::stoi(tok.substr(1));
                    if (id < NUM_RESERVED_IDS || id >= size_)
                        throw data_error("vocab: word id out of range in token '" + tok + "'");
                    t.ids.push_back(id);
                }
                pos = end;
            }
        }
        return t;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        if (mode_ == kind::byte_level) {
            for (int id : ids) {
                if (id < NUM_RESERVED_IDS) continue;  // reserved ids render as nothing
                if (id >= size_) throw data_error("vocab: id " + std::to_string(id) + " out of range");
                out.push_back(static_cast<char>(id - NUM_RESERVED_IDS));
            }
        } else {
            for (int id : ids) {
                if (id < NUM_RESERVED_IDS) continue;
                if (id >= size_) throw data_error("vocab: id " + std::to_string(id) + " out of range");
                if (!out.empty()) out.push_back(' ');
                out += "t" + std::to_string(id);
            }
        }
        return out;
    }

private:
    vocab(kind m, int size) : mode_(m), size_(size) {}
    kind mode_;
    int size_;
};

}  // namespace cas
