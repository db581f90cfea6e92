#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace langalign {

enum class Role { system, user, assistant };

std::string to_string(Role role);
Role parse_role(std::string_view name);

struct Turn {
    Role role;
    std::string content;

    bool operator==(const Turn&) const = default;
};

struct Conversation {
    std::vector<Turn> turns;

    // Optional leading system turn, then strictly alternating user/assistant
    // starting with user. With require_assistant, at least one assistant turn.
    void validate(bool require_assistant) const;
    bool operator==(const Conversation&) const = default;
};

struct TemplatedSequence {
    std::vector<int> token_ids;
    // 1 on assistant content tokens and their closing delimiter, else 0.
    std::vector<std::uint8_t> loss_mask;

    std::size_t size() const { return token_ids.size(); }
};

struct SpecialTokens {
    int pad = 0;
    int bos = 1;
    int eos = 2;
    int role_open = 3;
    int role_close = 4;
};

class TokenizerError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Byte-level BPE. Ids 0..4 are the special tokens, 5..260 the raw bytes, and
// learned merges follow in rank order.
class Tokenizer {
public:
    static constexpr int kNumSpecial = 5;
    static constexpr int kByteOffset = kNumSpecial;
    static constexpr int kFirstMerge = kByteOffset + 256;
    static constexpr int kFormatVersion = 1;

    // A byte-only tokenizer with no merges.
    Tokenizer();

    // Learns merges by repeatedly fusing the most frequent adjacent pair until
    // vocab_size is reached or no pair occurs twice. Ties go to the smaller pair.
    static Tokenizer train(std::span<const std::string> corpus, int vocab_size);

    static Tokenizer load(const std::filesystem::path& path);
    static Tokenizer parse(std::string_view text);
    void save(const std::filesystem::path& path) const;
    std::string serialize() const;

    std::vector<int> encode(std::string_view text) const;
    // Special tokens decode to their display names. Unknown ids throw.
    std::string decode(std::span<const int> ids) const;

    TemplatedSequence apply_chat_template(const Conversation& conv,
                                          bool require_assistant = true) const;
    std::size_t token_length(const Conversation& conv) const;

    // Prompt side of a single-turn exchange: everything up to and including
    // the assistant header, so a completion can be scored after it.
    std::vector<int> chat_prompt(std::string_view user_text) const;
    // Completion side: content tokens plus the closing delimiter.
    std::vector<int> chat_completion(std::string_view assistant_text) const;

    int vocab_size() const { return static_cast<int>(tokens_.size()); }
    int merge_count() const { return static_cast<int>(merges_.size()); }
    const SpecialTokens& special() const { return special_; }
    const std::string& token_bytes(int id) const;
    // Stable hash of the serialized vocabulary.
    std::uint64_t fingerprint() const;

private:
    struct Merge {
        int left;
        int right;
    };

    void add_merge(int left, int right);
    void encode_piece(std::string_view piece, std::vector<int>& out) const;
    void append_turn(Role role, const std::string& content, bool mask_content,
                     TemplatedSequence& seq) const;

    static std::uint64_t pair_key(int left, int right) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) |
               static_cast<std::uint32_t>(right);
    }

    SpecialTokens special_;
    std::vector<std::string> tokens_;
    std::vector<Merge> merges_;
    std::unordered_map<std::uint64_t, int> merge_rank_;
};

// Splits text into pre-tokenization pieces: a new piece starts at every space
// or newline. Concatenating the pieces yields the input.
std::vector<std::string_view> split_pieces(std::string_view text);

}  // namespace langalign
