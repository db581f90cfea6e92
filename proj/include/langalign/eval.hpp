#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "langalign/model.hpp"
#include "langalign/tokenizer.hpp"

namespace langalign {

struct MultipleChoiceItem {
    std::string context;
    std::vector<std::string> choices;
    int answer_index = 0;

    // At least two non-empty choices and an answer inside the range.
    void validate() const;
};

enum class Normalization { none, per_char };
std::string to_string(Normalization n);
Normalization parse_normalization(const std::string& name);

// plain: BOS + context, then the choice text.
// chat:  the context as a user turn, the choice as the assistant reply.
enum class PromptFormat { plain, chat };
std::string to_string(PromptFormat f);
PromptFormat parse_prompt_format(const std::string& name);

struct EvalOptions {
    Normalization normalization = Normalization::none;
    PromptFormat format = PromptFormat::plain;
    std::size_t threads = 1;
};

struct ItemResult {
    int chosen = 0;
    int answer = 0;
    bool correct = false;
    std::vector<double> scores;
};

struct TaskReport {
    std::string name;
    Normalization normalization = Normalization::none;
    PromptFormat format = PromptFormat::plain;
    double accuracy = 0.0;
    std::vector<ItemResult> items;
};

struct EvalReport {
    std::vector<TaskReport> tasks;
    // Externally supplied MT-Bench style scores; never computed here.
    std::optional<double> mt_bench;
};

class EvalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Index of the largest score; the lowest index wins ties.
int argmax_first(const std::vector<double>& scores);

// Throws SequenceLengthError when a context+choice exceeds max_seq_len.
template <typename T>
ItemResult score_choices(const ModelParams<T>& params, const Tokenizer& tokenizer,
                         const MultipleChoiceItem& item, const EvalOptions& options);

template <typename T>
TaskReport evaluate(const ModelParams<T>& params, const Tokenizer& tokenizer,
                    const std::vector<MultipleChoiceItem>& items, const EvalOptions& options,
                    const std::string& task_name = "task");

// Task JSONL, one {"context","choices","answer_index"} per line. Errors carry
// path:line.
std::vector<MultipleChoiceItem> load_task(const std::filesystem::path& path);
void write_task(const std::filesystem::path& path, const std::vector<MultipleChoiceItem>& items);

std::string report_json(const EvalReport& report);
// Task name, item count, and accuracy per row.
std::string report_table(const EvalReport& report);

struct NamedModel {
    std::string name;
    const ModelParams<float>& params;
    const Tokenizer& tokenizer;
};

struct ComparisonRow {
    std::string task;
    double accuracy_a = 0.0;
    double accuracy_b = 0.0;
};

struct Comparison {
    std::string name_a;
    std::string name_b;
    std::vector<ComparisonRow> rows;
};

// Task names are the file stems. Throws EvalError on a missing file or when
// the two tokenizers differ.
Comparison compare_models(const NamedModel& a, const NamedModel& b,
                          const std::vector<std::filesystem::path>& task_files,
                          const EvalOptions& options);

// Aligned plain-text table; the higher accuracy in each row is wrapped in
// ** **, neither on a tie.
std::string comparison_table(const Comparison& c);

}  // namespace langalign
