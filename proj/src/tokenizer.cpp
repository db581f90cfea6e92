#include "langalign/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "langalign/rng.hpp"

namespace langalign {

namespace {

constexpr const char* kSpecialNames[Tokenizer::kNumSpecial] = {
    "<|pad|>", "<|bos|>", "<|eos|>", "<|im_start|>", "<|im_end|>"};
constexpr const char* kSpecialKeys[Tokenizer::kNumSpecial] = {"pad", "bos", "eos", "role_open",
                                                              "role_close"};

std::string escape_bytes(const std::string& bytes) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned char c : bytes) {
        if (c > 0x20 && c < 0x7f && c != '\\') {
            out.push_back(static_cast<char>(c));
        } else {
            out += "\\x";
            out.push_back(kHex[c >> 4]);
            out.push_back(kHex[c & 0xf]);
        }
    }
    return out;
}

int hex_value(char c) {
    if (c >= '0' && c <= '9') {
        return c - '0';
    }
    if (c >= 'a' && c <= 'f') {
        return c - 'a' + 10;
    }
    if (c >= 'A' && c <= 'F') {
        return c - 'A' + 10;
    }
    return -1;
}

std::string unescape_bytes(std::string_view text, int line) {
    std::string out;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] != '\\') {
            out.push_back(text[i]);
            continue;
        }
        if (i + 3 >= text.size() || text[i + 1] != 'x') {
            throw TokenizerError("vocab line " + std::to_string(line) + ": bad escape");
        }
        const int hi = hex_value(text[i + 2]);
        const int lo = hex_value(text[i + 3]);
        if (hi < 0 || lo < 0) {
            throw TokenizerError("vocab line " + std::to_string(line) + ": bad hex escape");
        }
        out.push_back(static_cast<char>(hi * 16 + lo));
        i += 3;
    }
    return out;
}

void merge_in_place(std::vector<int>& seq, int left, int right, int merged) {
    std::size_t write = 0;
    for (std::size_t read = 0; read < seq.size();) {
        if (read + 1 < seq.size() && seq[read] == left && seq[read + 1] == right) {
            seq[write++] = merged;
            read += 2;
        } else {
            seq[write++] = seq[read++];
        }
    }
    seq.resize(write);
}

}  // namespace

std::string to_string(Role role) {
    switch (role) {
        case Role::system:
            return "system";
        case Role::user:
            return "user";
        case Role::assistant:
            return "assistant";
    }
    return "unknown";
}

Role parse_role(std::string_view name) {
    if (name == "system") {
        return Role::system;
    }
    if (name == "user") {
        return Role::user;
    }
    if (name == "assistant") {
        return Role::assistant;
    }
    throw std::invalid_argument("unknown role '" + std::string(name) + "'");
}

void Conversation::validate(bool require_assistant) const {
    if (turns.empty()) {
        throw std::invalid_argument("conversation has no turns");
    }
    std::size_t i = 0;
    if (turns[0].role == Role::system) {
        i = 1;
    }
    bool has_assistant = false;
    for (std::size_t k = i; k < turns.size(); ++k) {
        const Role expected = ((k - i) % 2 == 0) ? Role::user : Role::assistant;
        if (turns[k].role != expected) {
            throw std::invalid_argument("conversation turn " + std::to_string(k) + " has role " +
                                        to_string(turns[k].role) + ", expected " +
                                        to_string(expected));
        }
        has_assistant = has_assistant || turns[k].role == Role::assistant;
    }
    if (require_assistant && !has_assistant) {
        throw std::invalid_argument("conversation has no assistant turn");
    }
}

std::vector<std::string_view> split_pieces(std::string_view text) {
    std::vector<std::string_view> pieces;
    std::size_t start = 0;
    for (std::size_t i = 1; i < text.size(); ++i) {
        if (text[i] == ' ' || text[i] == '\n') {
            pieces.push_back(text.substr(start, i - start));
            start = i;
        }
    }
    if (start < text.size()) {
        pieces.push_back(text.substr(start));
    }
    return pieces;
}

Tokenizer::Tokenizer() {
    tokens_.reserve(kFirstMerge);
    for (const char* name : kSpecialNames) {
        tokens_.emplace_back(name);
    }
    for (int b = 0; b < 256; ++b) {
        tokens_.emplace_back(1, static_cast<char>(b));
    }
}

void Tokenizer::add_merge(int left, int right) {
    merges_.push_back({left, right});
    merge_rank_.emplace(pair_key(left, right), static_cast<int>(merges_.size()) - 1);
    tokens_.push_back(tokens_.at(static_cast<std::size_t>(left)) +
                      tokens_.at(static_cast<std::size_t>(right)));
}

Tokenizer Tokenizer::train(std::span<const std::string> corpus, int vocab_size) {
    if (vocab_size < kFirstMerge) {
        throw std::invalid_argument("vocab_size must be at least " + std::to_string(kFirstMerge));
    }
    Tokenizer tok;
    // Unique pieces with their frequencies; std::map keeps iteration deterministic.
    std::map<std::string, std::int64_t> counts;
    for (const auto& text : corpus) {
        for (auto piece : split_pieces(text)) {
            ++counts[std::string(piece)];
        }
    }
    std::vector<std::vector<int>> words;
    std::vector<std::int64_t> freq;
    words.reserve(counts.size());
    for (const auto& [piece, count] : counts) {
        std::vector<int> ids;
        ids.reserve(piece.size());
        for (unsigned char c : piece) {
            ids.push_back(kByteOffset + c);
        }
        words.push_back(std::move(ids));
        freq.push_back(count);
    }

    std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
    while (tok.vocab_size() < vocab_size) {
        pair_counts.clear();
        for (std::size_t w = 0; w < words.size(); ++w) {
            const auto& ids = words[w];
            for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
                pair_counts[pair_key(ids[i], ids[i + 1])] += freq[w];
            }
        }
        std::uint64_t best_key = 0;
        std::int64_t best_count = 0;
        for (const auto& [key, count] : pair_counts) {
            if (count > best_count || (count == best_count && key < best_key)) {
                best_key = key;
                best_count = count;
            }
        }
        if (best_count < 2) {
            break;
        }
        const int left = static_cast<int>(best_key >> 32);
        const int right = static_cast<int>(best_key & 0xffffffffULL);
        const int merged = tok.vocab_size();
        tok.add_merge(left, right);
        for (auto& ids : words) {
            merge_in_place(ids, left, right, merged);
        }
    }
    return tok;
}

void Tokenizer::encode_piece(std::string_view piece, std::vector<int>& out) const {
    std::vector<int> seq;
    seq.reserve(piece.size());
    for (unsigned char c : piece) {
        seq.push_back(kByteOffset + c);
    }
    while (seq.size() > 1) {
        int best_rank = -1;
        for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
            auto it = merge_rank_.find(pair_key(seq[i], seq[i + 1]));
            if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) {
                best_rank = it->second;
            }
        }
        if (best_rank < 0) {
            break;
        }
        const auto& m = merges_[static_cast<std::size_t>(best_rank)];
        merge_in_place(seq, m.left, m.right, kFirstMerge + best_rank);
    }
    out.insert(out.end(), seq.begin(), seq.end());
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> out;
    for (auto piece : split_pieces(text)) {
        encode_piece(piece, out);
    }
    return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        if (id < 0 || id >= vocab_size()) {
            throw TokenizerError("decode: unknown token id " + std::to_string(id));
        }
        out += tokens_[static_cast<std::size_t>(id)];
    }
    return out;
}

const std::string& Tokenizer::token_bytes(int id) const {
    if (id < 0 || id >= vocab_size()) {
        throw TokenizerError("unknown token id " + std::to_string(id));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

void Tokenizer::append_turn(Role role, const std::string& content, bool mask_content,
                            TemplatedSequence& seq) const {
    auto push = [&seq](int id, bool masked) {
        seq.token_ids.push_back(id);
        seq.loss_mask.push_back(masked ? 1 : 0);
    };
    push(special_.role_open, false);
    for (int id : encode(to_string(role) + "\n")) {
        push(id, false);
    }
    for (int id : encode(content)) {
        push(id, mask_content);
    }
    push(special_.role_close, mask_content);
    for (int id : encode("\n")) {
        push(id, false);
    }
}

TemplatedSequence Tokenizer::apply_chat_template(const Conversation& conv,
                                                 bool require_assistant) const {
    conv.validate(require_assistant);
    TemplatedSequence seq;
    seq.token_ids.push_back(special_.bos);
    seq.loss_mask.push_back(0);
    for (const auto& turn : conv.turns) {
        append_turn(turn.role, turn.content, turn.role == Role::assistant, seq);
    }
    if (conv.turns.back().role == Role::assistant) {
        seq.token_ids.push_back(special_.eos);
        seq.loss_mask.push_back(0);
    }
    return seq;
}

std::size_t Tokenizer::token_length(const Conversation& conv) const {
    return apply_chat_template(conv, false).size();
}

std::vector<int> Tokenizer::chat_prompt(std::string_view user_text) const {
    TemplatedSequence seq;
    seq.token_ids.push_back(special_.bos);
    seq.loss_mask.push_back(0);
    append_turn(Role::user, std::string(user_text), false, seq);
    seq.token_ids.push_back(special_.role_open);
    for (int id : encode("assistant\n")) {
        seq.token_ids.push_back(id);
    }
    return seq.token_ids;
}

std::vector<int> Tokenizer::chat_completion(std::string_view assistant_text) const {
    std::vector<int> ids = encode(assistant_text);
    ids.push_back(special_.role_close);
    return ids;
}

std::string Tokenizer::serialize() const {
    std::ostringstream out;
    out << "langalign-vocab v" << kFormatVersion << " tokens=" << tokens_.size()
        << " merges=" << merges_.size() << " specials=" << kNumSpecial << '\n';
    for (std::size_t id = 0; id < tokens_.size(); ++id) {
        out << escape_bytes(tokens_[id]);
        if (static_cast<int>(id) >= kFirstMerge) {
            const auto& m = merges_[id - kFirstMerge];
            out << '\t' << m.left << ' ' << m.right;
        }
        out << '\n';
    }
    const int ids[kNumSpecial] = {special_.pad, special_.bos, special_.eos, special_.role_open,
                                  special_.role_close};
    for (int i = 0; i < kNumSpecial; ++i) {
        out << "special " << kSpecialKeys[i] << ' ' << ids[i] << '\n';
    }
    return out.str();
}

void Tokenizer::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw TokenizerError("cannot write vocabulary file " + path.string());
    }
    out << serialize();
    if (!out) {
        throw TokenizerError("failed writing vocabulary file " + path.string());
    }
}

Tokenizer Tokenizer::parse(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        const std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) {
            lines.push_back(text.substr(start));
            break;
        }
        lines.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    if (lines.empty()) {
        throw TokenizerError("vocabulary file is empty");
    }
    std::istringstream header{std::string(lines[0])};
    std::string magic;
    std::string version;
    std::string tokens_field;
    std::string merges_field;
    std::string specials_field;
    header >> magic >> version >> tokens_field >> merges_field >> specials_field;
    if (magic != "langalign-vocab") {
        throw TokenizerError("not a vocabulary file (bad header)");
    }
    if (version != "v" + std::to_string(kFormatVersion)) {
        throw TokenizerError("unsupported vocabulary version '" + version + "'");
    }
    auto field = [](const std::string& f, const std::string& key) {
        if (f.rfind(key + "=", 0) != 0) {
            throw TokenizerError("vocabulary header missing " + key);
        }
        return std::stoll(f.substr(key.size() + 1));
    };
    const auto n_tokens = static_cast<std::size_t>(field(tokens_field, "tokens"));
    const auto n_merges = static_cast<std::size_t>(field(merges_field, "merges"));
    const auto n_specials = static_cast<std::size_t>(field(specials_field, "specials"));
    if (n_specials != kNumSpecial || n_tokens != kFirstMerge + n_merges) {
        throw TokenizerError("vocabulary header counts are inconsistent");
    }
    if (lines.size() < 1 + n_tokens + n_specials) {
        throw TokenizerError("vocabulary file truncated");
    }

    Tokenizer tok;
    for (std::size_t id = 0; id < kFirstMerge; ++id) {
        const int line_no = static_cast<int>(id) + 2;
        if (unescape_bytes(lines[1 + id], line_no) != tok.tokens_[id]) {
            throw TokenizerError("vocab line " + std::to_string(line_no) +
                                 ": base token does not match");
        }
    }
    for (std::size_t id = kFirstMerge; id < n_tokens; ++id) {
        const int line_no = static_cast<int>(id) + 2;
        const auto line = lines[1 + id];
        const auto tab = line.find('\t');
        if (tab == std::string_view::npos) {
            throw TokenizerError("vocab line " + std::to_string(line_no) + ": missing merge pair");
        }
        std::istringstream pair{std::string(line.substr(tab + 1))};
        int left = -1;
        int right = -1;
        pair >> left >> right;
        if (left < kByteOffset || right < kByteOffset || left >= static_cast<int>(id) ||
            right >= static_cast<int>(id)) {
            throw TokenizerError("vocab line " + std::to_string(line_no) + ": invalid merge pair");
        }
        tok.add_merge(left, right);
        if (unescape_bytes(line.substr(0, tab), line_no) != tok.tokens_.back()) {
            throw TokenizerError("vocab line " + std::to_string(line_no) +
                                 ": token bytes disagree with merge pair");
        }
    }
    int assigned[kNumSpecial];
    for (std::size_t i = 0; i < kNumSpecial; ++i) {
        std::istringstream line{std::string(lines[1 + n_tokens + i])};
        std::string word;
        std::string key;
        int id = -1;
        line >> word >> key >> id;
        if (word != "special" || key != kSpecialKeys[i] || id < 0 || id >= kNumSpecial) {
            throw TokenizerError("vocabulary special-token line " +
                                 std::to_string(2 + n_tokens + i) + " is malformed");
        }
        assigned[i] = id;
    }
    tok.special_ = {assigned[0], assigned[1], assigned[2], assigned[3], assigned[4]};
    return tok;
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw TokenizerError("cannot open vocabulary file " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str());
}

std::uint64_t Tokenizer::fingerprint() const {
    const std::string text = serialize();
    return fnv1a64(text.data(), text.size());
}

}  // namespace langalign
