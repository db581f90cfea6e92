#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "langalign/dataprep.hpp"
#include "langalign/eval.hpp"
#include "langalign/rng.hpp"

namespace langalign::synthetic {

// Fixed German word list used by every generator.
const std::vector<std::string>& words();

// Chat records whose user turn is a random word string and whose assistant
// turn repeats it exactly.
std::vector<CorpusRecord> copy_corpus(std::size_t n, std::size_t min_words, std::size_t max_words,
                                      std::uint64_t seed, const std::string& license = "mit");

// A grammatical four-word sentence: determiner, matching noun, verb, adverb.
std::vector<std::string> sentence_words(Rng& rng);

// Preference records: the prompt lists a sentence's words in sorted order,
// chosen is the sentence, rejected is a non-identity shuffle of its words.
std::vector<CorpusRecord> preference_corpus(std::size_t n, std::uint64_t seed,
                                            const std::string& license = "mit");

// Chat records answering the same word-ordering prompts with the correct
// sentence (SFT data for the toy pipeline).
std::vector<CorpusRecord> ordering_chats(std::size_t n, std::uint64_t seed,
                                         const std::string& license = "mit");

// Multiple-choice version of the ordering prompts: the sentence plus
// n_choices - 1 (at most 3) variants with one adjacent pair swapped, answer
// position drawn at random.
std::vector<MultipleChoiceItem> ordering_task(std::size_t n, std::uint64_t seed,
                                              std::size_t n_choices = 4);

// Training text for a tokenizer covering the generators' vocabulary.
std::vector<std::string> tokenizer_corpus();

}  // namespace langalign::synthetic
