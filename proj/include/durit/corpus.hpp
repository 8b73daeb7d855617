#pragma once

// Synthetic arithmetic word problems: canonical operation chains, several
// surface renderings (with number words, filler and distractor sentences),
// symbol-style perturbations, and exact answer checking.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "durit/rng.hpp"

namespace durit {

// ---- vocabulary -------------------------------------------------------------

class Vocab {
public:
    Vocab();

    int id(std::string_view word) const;  // throws on unknown words
    std::optional<int> find(std::string_view word) const;
    const std::string& word(int id) const;
    int size() const noexcept { return static_cast<int>(words_.size()); }

    std::vector<int> encode(std::string_view text) const;  // space separated
    std::string decode(std::span<const int> tokens) const;

    int bos() const noexcept { return bos_; }
    int eos() const noexcept { return eos_; }
    int sep() const noexcept { return sep_; }
    int tpl() const noexcept { return tpl_; }
    int marker() const noexcept { return marker_; }

    // Digit token for 0..max_numeral, number-word token for 0..20.
    int numeral(int value) const;
    std::optional<int> number_word(int value) const;
    // Value of a digit or number-word token.
    std::optional<int> value_of(int token) const;

    static constexpr int max_numeral = 99;
    static constexpr int max_number_word = 20;

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
    int bos_ = 0, eos_ = 0, sep_ = 0, tpl_ = 0, marker_ = 0;
    std::vector<int> numerals_;
    std::vector<int> number_words_;
};

const Vocab& vocab();

// ---- canonical forms --------------------------------------------------------

enum class Op : char { add = '+', sub = '-', mul = '*' };

inline constexpr int kMaxSkeletons = 24;

// Skeletons are left-to-right chains ((a o1 b) o2 c) o3 d: every 1- and
// 2-operation chain plus the 3-operation chains with exactly one multiply.
const std::vector<Op>& skeleton_ops(int skeleton_id);
std::optional<int> skeleton_id_of(std::span<const Op> ops);

struct CanonicalForm {
    int skeleton_id = 0;
    std::vector<int> operands;
    std::vector<Op> ops;
    int answer = 0;

    std::string to_string() const;  // e.g. "((3+4)*2)"
    bool operator==(const CanonicalForm&) const = default;
};

// Evaluates left to right; nullopt if any intermediate leaves [0, max_value].
std::optional<int> evaluate_chain(std::span<const int> operands, std::span<const Op> ops,
                                  int max_value);
std::optional<CanonicalForm> parse_canonical_string(std::string_view s);

// ---- instances ---------------------------------------------------------------

enum class Style : int { bare = 0, story = 1, verbose_story = 2 };
inline constexpr int kNumStyles = 3;
const char* style_name(int style_id);

struct ProblemInstance {
    std::string id;
    std::string split;
    CanonicalForm canonical;
    std::vector<int> surface;
    int style_id = 0;
    int distractor_count = 0;
    std::optional<int> cluster_label;
    std::string lineage;  // empty if none
};

struct CorpusSpec {
    int n_skeletons = kMaxSkeletons;
    int operand_min = 2;
    int operand_max = 12;
    int max_value = 60;
    std::vector<int> styles = {0, 1, 2};
    double distractor_rate = 0.5;  // per slot
    int max_distractors = 2;
    int n_train = 3000;
    int n_test = 300;
    std::uint64_t seed = 1;
};

void validate(const CorpusSpec& spec);

struct Corpus {
    std::vector<ProblemInstance> train;
    std::vector<ProblemInstance> test_orig;
    std::vector<ProblemInstance> test_perturbed;  // test_perturbed[i].lineage == test_orig[i].id
};

Corpus generate_corpus(const CorpusSpec& spec);

std::vector<int> render_surface(const CanonicalForm& c, int style_id, int distractor_count,
                                Rng& rng);
// Bare style, no distractors, digits only. The mapper's target.
std::vector<int> canonical_rendering(const CanonicalForm& c);

ProblemInstance perturb_instance(const ProblemInstance& inst, const CorpusSpec& spec, Rng& rng);

struct ParsedSurface {
    CanonicalForm canonical;
    int distractor_count = 0;
};

// Reference parser: recovers the canonical form from any rendering, or
// nullopt if the tokens are not a well-formed problem.
std::optional<ParsedSurface> parse_surface(std::span<const int> tokens, int max_value = 99);

// Step-by-step solution ending in "#### <answer>", without the end token.
std::vector<int> reference_solution(const CanonicalForm& c);

// ---- answers ---------------------------------------------------------------

std::optional<int> extract_answer(std::span<const int> tokens);
bool is_correct(std::span<const int> response, const ProblemInstance& inst);
bool detect_leak(const ProblemInstance& original, std::span<const int> mapped);

// ---- prompt layouts ------------------------------------------------------------

// [bos] Q [sep]
std::vector<int> reasoner_prompt(std::span<const int> question);
// [bos] Q [tpl] [sep]; the template row is injected at template_position().
std::vector<int> mapper_prompt(std::span<const int> question);
int template_position(std::span<const int> question);
// Strips a trailing end token.
std::vector<int> strip_eos(std::span<const int> tokens);

// Text used to embed an instance for clustering: surface ; skeleton ; answer.
std::vector<int> clustering_text(const ProblemInstance& inst);

// ---- serialization -------------------------------------------------------------

std::string to_jsonl(const ProblemInstance& inst);
ProblemInstance from_jsonl(std::string_view line);
void write_jsonl(const std::string& path, std::span<const ProblemInstance> items);
std::vector<ProblemInstance> read_jsonl(const std::string& path);

}  // namespace durit
