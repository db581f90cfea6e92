#include "langalign/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <mutex>
#include <thread>

#include "langalign/dataprep.hpp"

namespace langalign {

void MultipleChoiceItem::validate() const {
    if (choices.size() < 2) {
        throw FormatError("item needs at least two choices, got " + std::to_string(choices.size()));
    }
    for (const auto& c : choices) {
        if (c.empty()) throw FormatError("item has an empty choice");
    }
    if (answer_index < 0 || static_cast<std::size_t>(answer_index) >= choices.size()) {
        throw FormatError("answer_index " + std::to_string(answer_index) + " out of range");
    }
}

std::string to_string(Normalization n) { return n == Normalization::none ? "none" : "per_char"; }

Normalization parse_normalization(const std::string& name) {
    if (name == "none") return Normalization::none;
    if (name == "per_char") return Normalization::per_char;
    throw std::invalid_argument("unknown normalization '" + name + "' (none, per_char)");
}

std::string to_string(PromptFormat f) { return f == PromptFormat::plain ? "plain" : "chat"; }

PromptFormat parse_prompt_format(const std::string& name) {
    if (name == "plain") return PromptFormat::plain;
    if (name == "chat") return PromptFormat::chat;
    throw std::invalid_argument("unknown prompt format '" + name + "' (plain, chat)");
}

int argmax_first(const std::vector<double>& scores) {
    int best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) best = static_cast<int>(i);
    }
    return best;
}

template <typename T>
ItemResult score_choices(const ModelParams<T>& params, const Tokenizer& tokenizer,
                         const MultipleChoiceItem& item, const EvalOptions& options) {
    item.validate();
    NoGradGuard no_grad;
    std::vector<int> prompt;
    if (options.format == PromptFormat::chat) {
        prompt = tokenizer.chat_prompt(item.context);
    } else {
        prompt.push_back(tokenizer.special().bos);
        const auto ctx = tokenizer.encode(item.context);
        prompt.insert(prompt.end(), ctx.begin(), ctx.end());
    }
    ItemResult r;
    r.answer = item.answer_index;
    for (const auto& choice : item.choices) {
        const auto completion = options.format == PromptFormat::chat
                                    ? tokenizer.chat_completion(choice)
                                    : tokenizer.encode(choice);
        double score = sequence_logprob(params, std::span<const int>(prompt),
                                        std::span<const int>(completion));
        if (options.normalization == Normalization::per_char) {
            score /= static_cast<double>(utf8_length(choice));
        }
        r.scores.push_back(score);
    }
    r.chosen = argmax_first(r.scores);
    r.correct = r.chosen == r.answer;
    return r;
}

template <typename T>
TaskReport evaluate(const ModelParams<T>& params, const Tokenizer& tokenizer,
                    const std::vector<MultipleChoiceItem>& items, const EvalOptions& options,
                    const std::string& task_name) {
    if (items.empty()) throw EvalError("task " + task_name + " has no items");
    TaskReport report{task_name, options.normalization, options.format, 0.0, {}};
    report.items.resize(items.size());

    const std::size_t workers = std::clamp<std::size_t>(options.threads, 1, items.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < items.size();) {
            try {
                report.items[i] = score_choices(params, tokenizer, items[i], options);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next = items.size();
            }
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    std::size_t correct = 0;
    for (const auto& r : report.items) correct += r.correct ? 1 : 0;
    report.accuracy = static_cast<double>(correct) / static_cast<double>(items.size());
    return report;
}

std::vector<MultipleChoiceItem> load_task(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw EvalError("cannot open task file " + path.string());
    std::vector<MultipleChoiceItem> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
        try {
            const auto j = nlohmann::json::parse(line);
            MultipleChoiceItem item;
            item.context = j.at("context").get<std::string>();
            item.choices = j.at("choices").get<std::vector<std::string>>();
            item.answer_index = j.at("answer_index").get<int>();
            item.validate();
            out.push_back(std::move(item));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(where + e.what());
        } catch (const FormatError& e) {
            throw FormatError(where + e.what());
        }
    }
    if (out.empty()) throw FormatError(path.string() + ": no items");
    return out;
}

void write_task(const std::filesystem::path& path, const std::vector<MultipleChoiceItem>& items) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& item : items) {
        nlohmann::ordered_json j;
        j["context"] = item.context;
        j["choices"] = item.choices;
        j["answer_index"] = item.answer_index;
        out << j.dump() << '\n';
    }
}

std::string report_json(const EvalReport& report) {
    nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
    for (const auto& t : report.tasks) {
        nlohmann::ordered_json items = nlohmann::ordered_json::array();
        for (const auto& r : t.items) {
            nlohmann::ordered_json j;
            j["chosen"] = r.chosen;
            j["answer"] = r.answer;
            j["correct"] = r.correct;
            j["scores"] = r.scores;
            items.push_back(std::move(j));
        }
        nlohmann::ordered_json j;
        j["name"] = t.name;
        j["normalization"] = to_string(t.normalization);
        j["format"] = to_string(t.format);
        j["n"] = t.items.size();
        j["accuracy"] = t.accuracy;
        j["items"] = std::move(items);
        tasks.push_back(std::move(j));
    }
    nlohmann::ordered_json j;
    j["tasks"] = std::move(tasks);
    j["mt_bench"] = report.mt_bench ? nlohmann::ordered_json(*report.mt_bench)
                                 : nlohmann::ordered_json(nullptr);
    return j.dump(2) + "\n";
}

namespace {

std::string fixed4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

std::string render(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width(rows.front().size(), 0);
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            width[c] = std::max(width[c], utf8_length(row[c]));
        }
    }
    std::string out;
    auto emit = [&](const std::vector<std::string>& row) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            const std::size_t pad = width[c] - utf8_length(row[c]);
            if (c == 0) {
                out += row[c] + std::string(pad, ' ');
            } else {
                out += "  " + std::string(pad, ' ') + row[c];
            }
        }
        while (!out.empty() && out.back() == ' ') out.pop_back();
        out += '\n';
    };
    emit(rows.front());
    std::size_t total = 0;
    for (auto w : width) total += w;
    out += std::string(total + 2 * (width.size() - 1), '-') + '\n';
    for (std::size_t r = 1; r < rows.size(); ++r) emit(rows[r]);
    return out;
}

}  // namespace

std::string report_table(const EvalReport& report) {
    std::vector<std::vector<std::string>> rows{{"task", "n", "norm", "accuracy"}};
    for (const auto& t : report.tasks) {
        rows.push_back({t.name, std::to_string(t.items.size()), to_string(t.normalization),
                        fixed4(t.accuracy)});
    }
    return render(rows);
}

Comparison compare_models(const NamedModel& a, const NamedModel& b,
                          const std::vector<std::filesystem::path>& task_files,
                          const EvalOptions& options) {
    if (a.tokenizer.fingerprint() != b.tokenizer.fingerprint()) {
        throw EvalError("tokenizer mismatch between " + a.name + " and " + b.name);
    }
    for (const NamedModel* m : {&a, &b}) {
        if (m->params.config.vocab_size != m->tokenizer.vocab_size()) {
            throw EvalError("tokenizer mismatch: " + m->name + " has vocab " +
                            std::to_string(m->params.config.vocab_size) + ", tokenizer has " +
                            std::to_string(m->tokenizer.vocab_size()));
        }
    }
    Comparison c{a.name, b.name, {}};
    for (const auto& path : task_files) {
        if (!std::filesystem::exists(path)) throw EvalError("missing task file " + path.string());
    }
    for (const auto& path : task_files) {
        const auto items = load_task(path);
        const std::string task = path.stem().string();
        c.rows.push_back({task, evaluate(a.params, a.tokenizer, items, options, task).accuracy,
                          evaluate(b.params, b.tokenizer, items, options, task).accuracy});
    }
    return c;
}

std::string comparison_table(const Comparison& c) {
    std::vector<std::vector<std::string>> rows{{"task", c.name_a, c.name_b}};
    for (const auto& r : c.rows) {
        std::string a = fixed4(r.accuracy_a);
        std::string b = fixed4(r.accuracy_b);
        if (r.accuracy_a > r.accuracy_b) a = "**" + a + "**";
        if (r.accuracy_b > r.accuracy_a) b = "**" + b + "**";
        rows.push_back({r.task, a, b});
    }
    return render(rows);
}

template ItemResult score_choices(const ModelParams<float>&, const Tokenizer&,
                                  const MultipleChoiceItem&, const EvalOptions&);
template ItemResult score_choices(const ModelParams<double>&, const Tokenizer&,
                                  const MultipleChoiceItem&, const EvalOptions&);
template TaskReport evaluate(const ModelParams<float>&, const Tokenizer&,
                             const std::vector<MultipleChoiceItem>&, const EvalOptions&,
                             const std::string&);
template TaskReport evaluate(const ModelParams<double>&, const Tokenizer&,
                             const std::vector<MultipleChoiceItem>&, const EvalOptions&,
                             const std::string&);

}  // namespace langalign
