#include "langalign/synthetic.hpp"

#include <algorithm>

namespace langalign::synthetic {

namespace {

struct NounGroup {
    const char* article;
    std::vector<std::string> nouns;
};

const std::vector<NounGroup>& noun_groups() {
    static const std::vector<NounGroup> groups = {
        {"Der", {"Hund", "Vogel", "Fisch", "Mann", "Bauer", "Lehrer"}},
        {"Die", {"Katze", "Frau", "Maus", "Ente", "Biene", "Nachbarin"}},
        {"Das", {"Kind", "Pferd", "Schaf", "Huhn", "Reh", "Team"}},
    };
    return groups;
}

const std::vector<std::string>& verbs() {
    static const std::vector<std::string> v = {"läuft", "schläft", "spielt", "singt",
                                               "wartet", "lacht", "arbeitet", "tanzt"};
    return v;
}

const std::vector<std::string>& adverbs() {
    static const std::vector<std::string> v = {"schnell", "langsam", "heute", "gern",
                                               "draußen", "leise", "morgen", "oft"};
    return v;
}

std::string join(const std::vector<std::string>& parts) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += ' ';
        out += parts[i];
    }
    return out;
}

std::string id_for(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%05zu", prefix, i);
    return buf;
}

CorpusRecord make_chat(std::string id, const std::string& license, std::string user,
                       std::string assistant) {
    CorpusRecord r;
    r.id = std::move(id);
    r.license = license;
    r.payload = Conversation{{{Role::user, std::move(user)}, {Role::assistant, std::move(assistant)}}};
    r.char_count = count_chars(r);
    return r;
}

std::string ordering_prompt(std::vector<std::string> words_in) {
    std::sort(words_in.begin(), words_in.end());
    return "Ordne die Wörter: " + join(words_in);
}

}  // namespace

const std::vector<std::string>& words() {
    static const std::vector<std::string> w = {
        "Apfel", "Baum",  "Berg",   "Blume", "Brot",  "Buch",  "Dach",  "Eis",
        "Feld",  "Glas",  "Haus",   "Hut",   "Insel", "Kerze", "Kuchen", "Lampe",
        "Licht", "Milch", "Mond",   "Nebel", "Ofen",  "Papier", "Regen", "Salz",
        "Schuh", "See",   "Sonne",  "Stern", "Tisch", "Uhr",   "Wald",  "Wolke",
    };
    return w;
}

std::vector<CorpusRecord> copy_corpus(std::size_t n, std::size_t min_words, std::size_t max_words,
                                      std::uint64_t seed, const std::string& license) {
    if (min_words < 1 || max_words < min_words) {
        throw std::invalid_argument("copy_corpus: need 1 <= min_words <= max_words");
    }
    Rng rng(seed);
    std::vector<CorpusRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = min_words + rng.below(max_words - min_words + 1);
        std::vector<std::string> picked;
        for (std::size_t j = 0; j < k; ++j) picked.push_back(words()[rng.below(words().size())]);
        const std::string text = join(picked);
        out.push_back(make_chat(id_for("copy", i), license, text, text));
    }
    return out;
}

std::vector<std::string> sentence_words(Rng& rng) {
    const auto& group = noun_groups()[rng.below(noun_groups().size())];
    return {group.article, group.nouns[rng.below(group.nouns.size())],
            verbs()[rng.below(verbs().size())], adverbs()[rng.below(adverbs().size())]};
}

std::vector<CorpusRecord> preference_corpus(std::size_t n, std::uint64_t seed,
                                            const std::string& license) {
    Rng rng(seed);
    std::vector<CorpusRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto w = sentence_words(rng);
        auto shuffled = w;
        while (shuffled == w) rng.shuffle(std::span<std::string>(shuffled));
        CorpusRecord r;
        r.id = id_for("pref", i);
        r.license = license;
        r.payload = PreferencePair{ordering_prompt(w), join(w) + ".", join(shuffled) + "."};
        r.char_count = count_chars(r);
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<CorpusRecord> ordering_chats(std::size_t n, std::uint64_t seed,
                                         const std::string& license) {
    Rng rng(seed);
    std::vector<CorpusRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto w = sentence_words(rng);
        out.push_back(make_chat(id_for("order", i), license, ordering_prompt(w), join(w) + "."));
    }
    return out;
}

std::vector<MultipleChoiceItem> ordering_task(std::size_t n, std::uint64_t seed,
                                              std::size_t n_choices) {
    if (n_choices < 2 || n_choices > 4) {
        throw std::invalid_argument("ordering_task: n_choices must be in [2, 4]");
    }
    Rng rng(seed);
    std::vector<MultipleChoiceItem> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto w = sentence_words(rng);
        std::vector<std::size_t> swaps{0, 1, 2};
        rng.shuffle(std::span<std::size_t>(swaps));
        std::vector<std::string> choices{join(w) + "."};
        for (std::size_t k = 0; choices.size() < n_choices; ++k) {
            auto s = w;
            std::swap(s[swaps[k]], s[swaps[k] + 1]);
            choices.push_back(join(s) + ".");
        }
        const auto answer = static_cast<std::size_t>(rng.below(n_choices));
        std::swap(choices[0], choices[answer]);
        out.push_back({ordering_prompt(w), std::move(choices), static_cast<int>(answer)});
    }
    return out;
}

std::vector<std::string> tokenizer_corpus() {
    std::vector<std::string> lines;
    for (const auto& w : words()) lines.push_back("Wiederhole: " + w + " " + w);
    for (const auto& g : noun_groups()) {
        for (const auto& noun : g.nouns) lines.push_back(std::string(g.article) + " " + noun + ".");
    }
    for (const auto& v : verbs()) lines.push_back("Ordne die Wörter: " + v);
    for (const auto& a : adverbs()) lines.push_back(a + ". " + a);
    for (const char* role : {"system\n", "user\n", "assistant\n"}) lines.push_back(role);
    return lines;
}

}  // namespace langalign::synthetic
