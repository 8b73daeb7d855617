#include "durit/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace durit {

// ---- vocabulary -------------------------------------------------------------

namespace {

const char* const kNumberWords[] = {"zero",    "one",     "two",       "three",    "four",
                                    "five",    "six",     "seven",     "eight",    "nine",
                                    "ten",     "eleven",  "twelve",    "thirteen", "fourteen",
                                    "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
                                    "twenty"};

const char* const kNames[] = {"anna", "ben", "carl", "dora", "emma", "finn", "gina", "hugo"};
const char* const kObjects[] = {"apples", "pens", "coins", "books", "cards", "eggs", "stamps",
                                "shells"};

const char* const kWords[] = {
    ":",     ".",      "?",     "compute", "plus",   "minus", "times",   "then",  "ignore",
    "is",    "has",    "gets",  "finds",   "more",   "gives", "away",    "loses", "makes",
    "as",    "many",   "how",   "does",    "have",   "now",   "the",     "years", "old",
    "shop",  "steps",  "it",    "a",       "sunny",  "day",   "everyone", "happy", "sky",
    "blue"};

const char* const kFillers[] = {"it is a sunny day .", "everyone is happy .", "the sky is blue ."};

}  // namespace

Vocab::Vocab() {
    auto add = [&](const std::string& w) {
        if (index_.count(w) != 0) {
            throw std::logic_error("vocab: duplicate word " + w);
        }
        index_.emplace(w, static_cast<int>(words_.size()));
        words_.push_back(w);
        return static_cast<int>(words_.size()) - 1;
    };
    bos_ = add("<bos>");
    eos_ = add("<eos>");
    sep_ = add("<sep>");
    tpl_ = add("<tpl>");
    marker_ = add("####");
    for (int v = 0; v <= max_numeral; ++v) {
        numerals_.push_back(add(std::to_string(v)));
    }
    for (const char* w : kNumberWords) {
        number_words_.push_back(add(w));
    }
    for (const char* w : kWords) {
        add(w);
    }
    for (const char* w : kNames) {
        add(w);
    }
    for (const char* w : kObjects) {
        add(w);
    }
}

std::optional<int> Vocab::find(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) {
        return std::nullopt;
    }
    return it->second;
}

int Vocab::id(std::string_view word) const {
    auto f = find(word);
    if (!f) {
        throw std::invalid_argument("vocab: unknown word '" + std::string(word) + "'");
    }
    return *f;
}

const std::string& Vocab::word(int id) const {
    if (id < 0 || id >= size()) {
        throw std::out_of_range("vocab: token id " + std::to_string(id) + " out of range");
    }
    return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(std::string_view text) const {
    std::vector<int> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && text[i] == ' ') {
            ++i;
        }
        std::size_t j = i;
        while (j < text.size() && text[j] != ' ') {
            ++j;
        }
        if (j > i) {
            out.push_back(id(text.substr(i, j - i)));
        }
        i = j;
    }
    return out;
}

std::string Vocab::decode(std::span<const int> tokens) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i != 0) {
            out += ' ';
        }
        out += word(tokens[i]);
    }
    return out;
}

int Vocab::numeral(int value) const {
    if (value < 0 || value > max_numeral) {
        throw std::out_of_range("vocab: no numeral token for " + std::to_string(value));
    }
    return numerals_[static_cast<std::size_t>(value)];
}

std::optional<int> Vocab::number_word(int value) const {
    if (value < 0 || value > max_number_word) {
        return std::nullopt;
    }
    return number_words_[static_cast<std::size_t>(value)];
}

std::optional<int> Vocab::value_of(int token) const {
    if (token >= numerals_.front() && token <= numerals_.back()) {
        return token - numerals_.front();
    }
    if (token >= number_words_.front() && token <= number_words_.back()) {
        return token - number_words_.front();
    }
    return std::nullopt;
}

const Vocab& vocab() {
    static const Vocab v;
    return v;
}

// ---- canonical forms --------------------------------------------------------

namespace {

std::vector<std::vector<Op>> build_skeletons() {
    const Op all[] = {Op::add, Op::sub, Op::mul};
    const Op addsub[] = {Op::add, Op::sub};
    std::vector<std::vector<Op>> out;
    for (Op a : all) {
        out.push_back({a});
    }
    for (Op a : all) {
        for (Op b : all) {
            out.push_back({a, b});
        }
    }
    for (int mul_pos = 0; mul_pos < 3; ++mul_pos) {
        for (Op x : addsub) {
            for (Op y : addsub) {
                std::vector<Op> ops;
                const Op rest[] = {x, y};
                int r = 0;
                for (int k = 0; k < 3; ++k) {
                    ops.push_back(k == mul_pos ? Op::mul : rest[r++]);
                }
                out.push_back(ops);
            }
        }
    }
    return out;
}

const std::vector<std::vector<Op>>& skeletons() {
    static const std::vector<std::vector<Op>> s = build_skeletons();
    return s;
}

const char* op_word(Op op) {
    switch (op) {
        case Op::add: return "plus";
        case Op::sub: return "minus";
        case Op::mul: return "times";
    }
    return "?";
}

int apply(int a, Op op, int b) {
    switch (op) {
        case Op::add: return a + b;
        case Op::sub: return a - b;
        case Op::mul: return a * b;
    }
    return 0;
}

}  // namespace

const std::vector<Op>& skeleton_ops(int skeleton_id) {
    if (skeleton_id < 0 || skeleton_id >= kMaxSkeletons) {
        throw std::out_of_range("skeleton id " + std::to_string(skeleton_id) + " out of range");
    }
    return skeletons()[static_cast<std::size_t>(skeleton_id)];
}

std::optional<int> skeleton_id_of(std::span<const Op> ops) {
    const auto& all = skeletons();
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (std::equal(all[i].begin(), all[i].end(), ops.begin(), ops.end())) {
            return static_cast<int>(i);
        }
    }
    return std::nullopt;
}

std::string CanonicalForm::to_string() const {
    std::string s(ops.size(), '(');
    s += std::to_string(operands.at(0));
    for (std::size_t i = 0; i < ops.size(); ++i) {
        s += static_cast<char>(ops[i]);
        s += std::to_string(operands.at(i + 1));
        s += ')';
    }
    return s;
}

std::optional<int> evaluate_chain(std::span<const int> operands, std::span<const Op> ops,
                                  int max_value) {
    if (operands.size() != ops.size() + 1) {
        return std::nullopt;
    }
    int v = operands[0];
    if (v < 0 || v > max_value) {
        return std::nullopt;
    }
    for (std::size_t i = 0; i < ops.size(); ++i) {
        v = apply(v, ops[i], operands[i + 1]);
        if (v < 0 || v > max_value) {
            return std::nullopt;
        }
    }
    return v;
}

std::optional<CanonicalForm> parse_canonical_string(std::string_view s) {
    std::size_t i = 0;
    std::size_t opens = 0;
    while (i < s.size() && s[i] == '(') {
        ++opens;
        ++i;
    }
    auto read_int = [&](int& out) {
        const char* b = s.data() + i;
        auto [p, ec] = std::from_chars(b, s.data() + s.size(), out);
        if (ec != std::errc{} || p == b) {
            return false;
        }
        i += static_cast<std::size_t>(p - b);
        return true;
    };
    CanonicalForm c;
    int v = 0;
    if (!read_int(v)) {
        return std::nullopt;
    }
    c.operands.push_back(v);
    while (i < s.size()) {
        const char op = s[i++];
        if (op != '+' && op != '-' && op != '*') {
            return std::nullopt;
        }
        c.ops.push_back(static_cast<Op>(op));
        if (!read_int(v) || i >= s.size() || s[i] != ')') {
            return std::nullopt;
        }
        ++i;
        c.operands.push_back(v);
    }
    if (c.ops.size() != opens || c.ops.empty()) {
        return std::nullopt;
    }
    auto sk = skeleton_id_of(c.ops);
    auto ans = evaluate_chain(c.operands, c.ops, 1 << 30);
    if (!sk || !ans) {
        return std::nullopt;
    }
    c.skeleton_id = *sk;
    c.answer = *ans;
    return c;
}

const char* style_name(int style_id) {
    switch (style_id) {
        case 0: return "bare";
        case 1: return "story";
        case 2: return "verbose-story";
        default: return "unknown";
    }
}

// ---- rendering -------------------------------------------------------------

namespace {

void append(std::vector<int>& out, std::string_view text) {
    const auto t = vocab().encode(text);
    out.insert(out.end(), t.begin(), t.end());
}

int number_token(int value, double p_word, Rng& rng) {
    const Vocab& V = vocab();
    auto w = V.number_word(value);
    if (w && p_word > 0.0 && uniform01(rng) < p_word) {
        return *w;
    }
    return V.numeral(value);
}

double word_probability(int style_id) {
    switch (style_id) {
        case 1: return 0.5;
        case 2: return 0.8;
        default: return 0.0;
    }
}

template <class T, std::size_t N>
const T& pick(const T (&arr)[N], Rng& rng) {
    return arr[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(N) - 1))];
}

using Sentence = std::vector<int>;

Sentence story_op_sentence(Op op, const std::string& name, const std::string& obj, int n,
                           double pw, Rng& rng) {
    const Vocab& V = vocab();
    Sentence s;
    if (uniform01(rng) < 0.5) {
        s.push_back(V.id("then"));
    }
    const int num = number_token(n, pw, rng);
    s.push_back(V.id(name));
    switch (op) {
        case Op::add:
            s.push_back(V.id(uniform01(rng) < 0.5 ? "gets" : "finds"));
            s.push_back(num);
            s.push_back(V.id("more"));
            s.push_back(V.id(obj));
            break;
        case Op::sub:
            if (uniform01(rng) < 0.5) {
                s.push_back(V.id("gives"));
                s.push_back(V.id("away"));
            } else {
                s.push_back(V.id("loses"));
            }
            s.push_back(num);
            s.push_back(V.id(obj));
            break;
        case Op::mul:
            s.push_back(V.id("makes"));
            s.push_back(num);
            append(s, "times as many");
            s.push_back(V.id(obj));
            break;
    }
    s.push_back(V.id("."));
    return s;
}

Sentence story_distractor(const std::string& name, const std::string& obj, double pw, Rng& rng) {
    const Vocab& V = vocab();
    Sentence s;
    std::string other = name;
    while (other == name) {
        other = pick(kNames, rng);
    }
    switch (uniform_int(rng, 0, 2)) {
        case 0: {
            std::string o2 = obj;
            while (o2 == obj) {
                o2 = pick(kObjects, rng);
            }
            s.push_back(V.id(other));
            s.push_back(V.id("has"));
            s.push_back(number_token(static_cast<int>(uniform_int(rng, 1, 20)), pw, rng));
            s.push_back(V.id(o2));
            break;
        }
        case 1:
            s.push_back(V.id(other));
            s.push_back(V.id("is"));
            s.push_back(number_token(static_cast<int>(uniform_int(rng, 5, 15)), pw, rng));
            append(s, "years old");
            break;
        default:
            append(s, "the shop is");
            s.push_back(number_token(static_cast<int>(uniform_int(rng, 2, 40)), pw, rng));
            append(s, "steps away");
            break;
    }
    s.push_back(V.id("."));
    return s;
}

// Inserts each extra sentence at a uniformly chosen gap of body.
void scatter(std::vector<Sentence>& body, std::vector<Sentence> extra, std::size_t first_gap,
             Rng& rng) {
    for (Sentence& e : extra) {
        const auto pos = static_cast<std::size_t>(
            uniform_int(rng, static_cast<std::int64_t>(first_gap),
                        static_cast<std::int64_t>(body.size())));
        body.insert(body.begin() + static_cast<std::ptrdiff_t>(pos), std::move(e));
    }
}

std::vector<int> flatten(const std::vector<Sentence>& body) {
    std::vector<int> out;
    for (const Sentence& s : body) {
        out.insert(out.end(), s.begin(), s.end());
    }
    return out;
}

}  // namespace

std::vector<int> render_surface(const CanonicalForm& c, int style_id, int distractor_count,
                                Rng& rng) {
    const Vocab& V = vocab();
    if (c.operands.size() != c.ops.size() + 1 || c.ops.empty()) {
        throw std::invalid_argument("render_surface: malformed canonical " + c.to_string());
    }
    if (style_id < 0 || style_id >= kNumStyles) {
        throw std::invalid_argument("render_surface: unknown style " + std::to_string(style_id));
    }
    if (distractor_count < 0) {
        throw std::invalid_argument("render_surface: negative distractor count");
    }
    std::vector<Sentence> body;
    if (style_id == static_cast<int>(Style::bare)) {
        Sentence s;
        append(s, "compute :");
        s.push_back(V.numeral(c.operands[0]));
        for (std::size_t i = 0; i < c.ops.size(); ++i) {
            if (i != 0) {
                s.push_back(V.id("then"));
            }
            s.push_back(V.id(op_word(c.ops[i])));
            s.push_back(V.numeral(c.operands[i + 1]));
        }
        s.push_back(V.id("."));
        body.push_back(std::move(s));
        std::vector<Sentence> extra;
        for (int k = 0; k < distractor_count; ++k) {
            Sentence d;
            d.push_back(V.id("ignore"));
            d.push_back(V.numeral(static_cast<int>(uniform_int(rng, 1, 20))));
            d.push_back(V.id("."));
            extra.push_back(std::move(d));
        }
        scatter(body, std::move(extra), 0, rng);
        return flatten(body);
    }

    const double pw = word_probability(style_id);
    const std::string name = pick(kNames, rng);
    const std::string obj = pick(kObjects, rng);
    {
        Sentence s;
        s.push_back(V.id(name));
        s.push_back(V.id("has"));
        s.push_back(number_token(c.operands[0], pw, rng));
        s.push_back(V.id(obj));
        s.push_back(V.id("."));
        body.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < c.ops.size(); ++i) {
        body.push_back(story_op_sentence(c.ops[i], name, obj, c.operands[i + 1], pw, rng));
    }
    std::vector<Sentence> extra;
    for (int k = 0; k < distractor_count; ++k) {
        extra.push_back(story_distractor(name, obj, pw, rng));
    }
    if (style_id == static_cast<int>(Style::verbose_story)) {
        const auto n_fill = uniform_int(rng, 1, 2);
        for (std::int64_t k = 0; k < n_fill; ++k) {
            Sentence f;
            append(f, pick(kFillers, rng));
            extra.push_back(std::move(f));
        }
    }
    scatter(body, std::move(extra), 0, rng);
    Sentence q;
    append(q, "how many");
    q.push_back(V.id(obj));
    q.push_back(V.id("does"));
    q.push_back(V.id(name));
    append(q, "have now ?");
    body.push_back(std::move(q));
    return flatten(body);
}

std::vector<int> canonical_rendering(const CanonicalForm& c) {
    Rng unused = make_rng(0);
    return render_surface(c, static_cast<int>(Style::bare), 0, unused);
}

// ---- reference parser -------------------------------------------------------------

namespace {

bool is_name(const std::string& w) {
    return std::find(std::begin(kNames), std::end(kNames), w) != std::end(kNames);
}

bool is_object(const std::string& w) {
    return std::find(std::begin(kObjects), std::end(kObjects), w) != std::end(kObjects);
}

std::vector<std::vector<std::string>> split_sentences(std::span<const int> tokens, bool& ok) {
    const Vocab& V = vocab();
    std::vector<std::vector<std::string>> out;
    std::vector<std::string> cur;
    ok = true;
    for (int t : tokens) {
        const std::string& w = V.word(t);
        cur.push_back(w);
        if (w == "." || w == "?") {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) {
        ok = false;
    }
    return out;
}

std::optional<int> number_of(const std::string& w) {
    auto id = vocab().find(w);
    if (!id) {
        return std::nullopt;
    }
    return vocab().value_of(*id);
}

bool matches(const std::vector<std::string>& s, std::initializer_list<const char*> pattern) {
    if (s.size() != pattern.size()) {
        return false;
    }
    std::size_t i = 0;
    for (const char* p : pattern) {
        if (std::string_view(p) != "_" && s[i] != p) {
            return false;
        }
        ++i;
    }
    return true;
}

std::optional<ParsedSurface> finish(CanonicalForm c, int distractors, int max_value) {
    auto sk = skeleton_id_of(c.ops);
    if (!sk) {
        return std::nullopt;
    }
    auto ans = evaluate_chain(c.operands, c.ops, max_value);
    if (!ans) {
        return std::nullopt;
    }
    c.skeleton_id = *sk;
    c.answer = *ans;
    return ParsedSurface{std::move(c), distractors};
}

std::optional<ParsedSurface> parse_bare(const std::vector<std::vector<std::string>>& sents,
                                        int max_value) {
    int distractors = 0;
    std::optional<CanonicalForm> chain;
    for (const auto& s : sents) {
        if (s.size() == 3 && s[0] == "ignore" && s[2] == "." && number_of(s[1])) {
            ++distractors;
            continue;
        }
        if (s.size() < 6 || s[0] != "compute" || s[1] != ":" || s.back() != "." || chain) {
            return std::nullopt;
        }
        CanonicalForm c;
        auto a = number_of(s[2]);
        if (!a) {
            return std::nullopt;
        }
        c.operands.push_back(*a);
        std::size_t i = 3;
        const std::size_t end = s.size() - 1;
        while (i < end) {
            if (!c.ops.empty()) {
                if (s[i] != "then") {
                    return std::nullopt;
                }
                ++i;
            }
            if (i + 1 >= end) {
                return std::nullopt;
            }
            Op op;
            if (s[i] == "plus") {
                op = Op::add;
            } else if (s[i] == "minus") {
                op = Op::sub;
            } else if (s[i] == "times") {
                op = Op::mul;
            } else {
                return std::nullopt;
            }
            auto b = number_of(s[i + 1]);
            if (!b) {
                return std::nullopt;
            }
            c.ops.push_back(op);
            c.operands.push_back(*b);
            i += 2;
        }
        chain = std::move(c);
    }
    if (!chain) {
        return std::nullopt;
    }
    return finish(std::move(*chain), distractors, max_value);
}

std::optional<ParsedSurface> parse_story(std::vector<std::vector<std::string>> sents,
                                         int max_value) {
    if (sents.empty()) {
        return std::nullopt;
    }
    const auto& q = sents.back();
    if (!matches(q, {"how", "many", "_", "does", "_", "have", "now", "?"}) || !is_object(q[2]) ||
        !is_name(q[4])) {
        return std::nullopt;
    }
    const std::string obj = q[2];
    const std::string name = q[4];
    sents.pop_back();
    CanonicalForm c;
    int distractors = 0;
    bool started = false;
    for (auto s : sents) {
        if (s.empty() || s.back() != ".") {
            return std::nullopt;
        }
        if (matches(s, {"it", "is", "a", "sunny", "day", "."}) ||
            matches(s, {"everyone", "is", "happy", "."}) ||
            matches(s, {"the", "sky", "is", "blue", "."})) {
            continue;
        }
        if (matches(s, {"the", "shop", "is", "_", "steps", "away", "."}) && number_of(s[3])) {
            ++distractors;
            continue;
        }
        if (matches(s, {"_", "is", "_", "years", "old", "."}) && is_name(s[0]) && s[0] != name &&
            number_of(s[2])) {
            ++distractors;
            continue;
        }
        if (matches(s, {"_", "has", "_", "_", "."}) && is_name(s[0]) && number_of(s[2]) &&
            is_object(s[3])) {
            if (s[0] != name) {
                ++distractors;
                continue;
            }
            if (started || s[3] != obj) {
                return std::nullopt;
            }
            c.operands.push_back(*number_of(s[2]));
            started = true;
            continue;
        }
        if (!s.empty() && s[0] == "then") {
            s.erase(s.begin());
        }
        if (!started || s.empty() || s[0] != name) {
            return std::nullopt;
        }
        std::optional<int> n;
        Op op;
        if ((matches(s, {"_", "gets", "_", "more", "_", "."}) ||
             matches(s, {"_", "finds", "_", "more", "_", "."})) &&
            s[4] == obj) {
            op = Op::add;
            n = number_of(s[2]);
        } else if (matches(s, {"_", "gives", "away", "_", "_", "."}) && s[4] == obj) {
            op = Op::sub;
            n = number_of(s[3]);
        } else if (matches(s, {"_", "loses", "_", "_", "."}) && s[3] == obj) {
            op = Op::sub;
            n = number_of(s[2]);
        } else if (matches(s, {"_", "makes", "_", "times", "as", "many", "_", "."}) &&
                   s[6] == obj) {
            op = Op::mul;
            n = number_of(s[2]);
        } else {
            return std::nullopt;
        }
        if (!n) {
            return std::nullopt;
        }
        c.ops.push_back(op);
        c.operands.push_back(*n);
    }
    if (!started || c.ops.empty()) {
        return std::nullopt;
    }
    return finish(std::move(c), distractors, max_value);
}

}  // namespace

std::optional<ParsedSurface> parse_surface(std::span<const int> tokens, int max_value) {
    bool ok = true;
    auto sents = split_sentences(tokens, ok);
    if (!ok || sents.empty()) {
        return std::nullopt;
    }
    for (const auto& s : sents) {
        if (!s.empty() && s[0] == "compute") {
            return parse_bare(sents, max_value);
        }
    }
    return parse_story(std::move(sents), max_value);
}

std::vector<int> reference_solution(const CanonicalForm& c) {
    const Vocab& V = vocab();
    std::vector<int> out;
    int v = c.operands.at(0);
    for (std::size_t i = 0; i < c.ops.size(); ++i) {
        const int r = apply(v, c.ops[i], c.operands.at(i + 1));
        out.push_back(V.numeral(v));
        out.push_back(V.id(op_word(c.ops[i])));
        out.push_back(V.numeral(c.operands[i + 1]));
        out.push_back(V.id("is"));
        out.push_back(V.numeral(r));
        out.push_back(V.id("."));
        v = r;
    }
    out.push_back(V.marker());
    out.push_back(V.numeral(v));
    return out;
}

// ---- generation -------------------------------------------------------------------

void validate(const CorpusSpec& spec) {
    if (spec.n_skeletons < 1 || spec.n_skeletons > kMaxSkeletons) {
        throw std::invalid_argument("corpus spec: n_skeletons must lie in [1, " +
                                    std::to_string(kMaxSkeletons) + "]");
    }
    if (spec.operand_min < 0 || spec.operand_min > spec.operand_max ||
        spec.operand_max > Vocab::max_numeral) {
        throw std::invalid_argument("corpus spec: invalid operand range");
    }
    if (spec.max_value < 1 || spec.max_value > Vocab::max_numeral) {
        throw std::invalid_argument("corpus spec: max_value must lie in [1, " +
                                    std::to_string(Vocab::max_numeral) + "]");
    }
    if (spec.styles.empty()) {
        throw std::invalid_argument("corpus spec: no styles");
    }
    for (int s : spec.styles) {
        if (s < 0 || s >= kNumStyles) {
            throw std::invalid_argument("corpus spec: unknown style " + std::to_string(s));
        }
    }
    if (spec.distractor_rate < 0.0 || spec.distractor_rate > 1.0 || spec.max_distractors < 0) {
        throw std::invalid_argument("corpus spec: invalid distractor settings");
    }
    if (spec.n_train < spec.n_skeletons || spec.n_test < 1) {
        throw std::invalid_argument("corpus spec: train split must cover every skeleton");
    }
}

namespace {

std::optional<CanonicalForm> sample_canonical(int skeleton, const CorpusSpec& spec, Rng& rng,
                                              const std::set<std::string>* exclude) {
    const auto& ops = skeleton_ops(skeleton);
    for (int attempt = 0; attempt < 2000; ++attempt) {
        CanonicalForm c;
        c.skeleton_id = skeleton;
        c.ops = ops;
        for (std::size_t i = 0; i <= ops.size(); ++i) {
            c.operands.push_back(static_cast<int>(uniform_int(rng, spec.operand_min, spec.operand_max)));
        }
        auto ans = evaluate_chain(c.operands, c.ops, spec.max_value);
        if (!ans) {
            continue;
        }
        c.answer = *ans;
        if (exclude != nullptr && exclude->count(c.to_string()) != 0) {
            continue;
        }
        return c;
    }
    return std::nullopt;
}

int sample_distractors(const CorpusSpec& spec, Rng& rng) {
    int n = 0;
    for (int k = 0; k < spec.max_distractors; ++k) {
        if (uniform01(rng) < spec.distractor_rate) {
            ++n;
        }
    }
    return n;
}

std::string make_id(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%05d", prefix, i);
    return buf;
}

ProblemInstance make_instance(std::string id, std::string split, CanonicalForm c,
                              const CorpusSpec& spec, Rng& rng) {
    ProblemInstance inst;
    inst.id = std::move(id);
    inst.split = std::move(split);
    inst.style_id =
        spec.styles[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(spec.styles.size()) - 1))];
    inst.distractor_count = sample_distractors(spec, rng);
    inst.surface = render_surface(c, inst.style_id, inst.distractor_count, rng);
    inst.canonical = std::move(c);
    return inst;
}

}  // namespace

ProblemInstance perturb_instance(const ProblemInstance& inst, const CorpusSpec& spec, Rng& rng) {
    auto c = sample_canonical(inst.canonical.skeleton_id, spec, rng, nullptr);
    if (!c) {
        throw std::runtime_error("perturb_instance: no valid operands for skeleton " +
                                 std::to_string(inst.canonical.skeleton_id));
    }
    ProblemInstance out;
    out.id = inst.id;
    out.split = "test_perturbed";
    out.style_id = inst.style_id;
    out.distractor_count = inst.distractor_count;
    out.surface = render_surface(*c, out.style_id, out.distractor_count, rng);
    out.canonical = std::move(*c);
    out.lineage = inst.id;
    return out;
}

Corpus generate_corpus(const CorpusSpec& spec) {
    validate(spec);
    Corpus corpus;
    std::set<std::string> reserved;
    for (int i = 0; i < spec.n_test; ++i) {
        Rng rng = make_rng(spec.seed, {fnv1a("corpus-test"), static_cast<std::uint64_t>(i)});
        const int sk = i % spec.n_skeletons;
        auto c = sample_canonical(sk, spec, rng, &reserved);
        if (!c) {
            throw std::invalid_argument("corpus spec: cannot find a fresh test problem for skeleton " +
                                        std::to_string(sk) + "; widen the operand range");
        }
        reserved.insert(c->to_string());
        corpus.test_orig.push_back(make_instance(make_id("test", i), "test_orig", std::move(*c), spec, rng));
    }
    for (int i = 0; i < spec.n_test; ++i) {
        Rng rng = make_rng(spec.seed, {fnv1a("corpus-perturb"), static_cast<std::uint64_t>(i)});
        ProblemInstance p = perturb_instance(corpus.test_orig[static_cast<std::size_t>(i)], spec, rng);
        p.id = make_id("pert", i);
        reserved.insert(p.canonical.to_string());
        corpus.test_perturbed.push_back(std::move(p));
    }
    for (int i = 0; i < spec.n_train; ++i) {
        Rng rng = make_rng(spec.seed, {fnv1a("corpus-train"), static_cast<std::uint64_t>(i)});
        const int sk = i % spec.n_skeletons;
        auto c = sample_canonical(sk, spec, rng, &reserved);
        if (!c) {
            throw std::invalid_argument("corpus spec: no training problem outside the test set for skeleton " +
                                        std::to_string(sk));
        }
        corpus.train.push_back(make_instance(make_id("train", i), "train", std::move(*c), spec, rng));
    }
    return corpus;
}

// ---- answers ----------------------------------------------------------------------

std::optional<int> extract_answer(std::span<const int> tokens) {
    const Vocab& V = vocab();
    std::optional<std::size_t> last;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == V.marker()) {
            last = i;
        }
    }
    if (!last || *last + 1 >= tokens.size()) {
        return std::nullopt;
    }
    const int t = tokens[*last + 1];
    if (t < 0 || t >= V.size()) {
        return std::nullopt;
    }
    const std::string& w = V.word(t);
    int value = 0;
    auto [p, ec] = std::from_chars(w.data(), w.data() + w.size(), value);
    if (ec != std::errc{} || p != w.data() + w.size()) {
        return std::nullopt;
    }
    return value;
}

bool is_correct(std::span<const int> response, const ProblemInstance& inst) {
    auto a = extract_answer(response);
    return a.has_value() && *a == inst.canonical.answer;
}

bool detect_leak(const ProblemInstance& original, std::span<const int> mapped) {
    const Vocab& V = vocab();
    auto contains = [](std::span<const int> seq, int tok) {
        return std::find(seq.begin(), seq.end(), tok) != seq.end();
    };
    if (contains(mapped, V.marker()) && !contains(original.surface, V.marker())) {
        return true;
    }
    const int ans = original.canonical.answer;
    std::vector<int> forms;
    if (ans >= 0 && ans <= Vocab::max_numeral) {
        forms.push_back(V.numeral(ans));
    }
    if (auto w = V.number_word(ans)) {
        forms.push_back(*w);
    }
    bool in_mapped = false;
    bool in_original = false;
    for (int f : forms) {
        in_mapped = in_mapped || contains(mapped, f);
        in_original = in_original || contains(original.surface, f);
    }
    return in_mapped && !in_original;
}

// ---- prompt layouts ------------------------------------------------------------

std::vector<int> reasoner_prompt(std::span<const int> question) {
    std::vector<int> out;
    out.reserve(question.size() + 2);
    out.push_back(vocab().bos());
    out.insert(out.end(), question.begin(), question.end());
    out.push_back(vocab().sep());
    return out;
}

std::vector<int> mapper_prompt(std::span<const int> question) {
    std::vector<int> out;
    out.reserve(question.size() + 3);
    out.push_back(vocab().bos());
    out.insert(out.end(), question.begin(), question.end());
    out.push_back(vocab().tpl());
    out.push_back(vocab().sep());
    return out;
}

int template_position(std::span<const int> question) { return static_cast<int>(question.size()) + 1; }

std::vector<int> strip_eos(std::span<const int> tokens) {
    std::vector<int> out(tokens.begin(), tokens.end());
    if (!out.empty() && out.back() == vocab().eos()) {
        out.pop_back();
    }
    return out;
}

std::vector<int> clustering_text(const ProblemInstance& inst) {
    const Vocab& V = vocab();
    std::vector<int> out = inst.surface;
    out.push_back(V.sep());
    for (Op op : inst.canonical.ops) {
        out.push_back(V.id(op_word(op)));
    }
    out.push_back(V.sep());
    out.push_back(V.numeral(inst.canonical.answer));
    return out;
}

// ---- serialization -------------------------------------------------------------

std::string to_jsonl(const ProblemInstance& inst) {
    nlohmann::ordered_json j;
    j["id"] = inst.id;
    j["split"] = inst.split;
    j["surface"] = vocab().decode(inst.surface);
    j["canonical"] = inst.canonical.to_string();
    j["answer"] = inst.canonical.answer;
    j["skeleton_id"] = inst.canonical.skeleton_id;
    j["style_id"] = inst.style_id;
    j["distractor_count"] = inst.distractor_count;
    j["cluster_label"] = inst.cluster_label ? nlohmann::ordered_json(*inst.cluster_label)
                                            : nlohmann::ordered_json(nullptr);
    j["lineage"] = inst.lineage.empty() ? nlohmann::ordered_json(nullptr)
                                        : nlohmann::ordered_json(inst.lineage);
    return j.dump();
}

ProblemInstance from_jsonl(std::string_view line) {
    const auto j = nlohmann::json::parse(line);
    ProblemInstance inst;
    inst.id = j.at("id").get<std::string>();
    inst.split = j.at("split").get<std::string>();
    inst.surface = vocab().encode(j.at("surface").get<std::string>());
    auto c = parse_canonical_string(j.at("canonical").get<std::string>());
    if (!c) {
        throw std::runtime_error("corpus record " + inst.id + ": malformed canonical form");
    }
    if (c->answer != j.at("answer").get<int>() || c->skeleton_id != j.at("skeleton_id").get<int>()) {
        throw std::runtime_error("corpus record " + inst.id + ": canonical fields disagree");
    }
    inst.canonical = *c;
    inst.style_id = j.at("style_id").get<int>();
    if (!j.at("lineage").is_null()) {
        inst.lineage = j.at("lineage").get<std::string>();
    }
    auto parsed = parse_surface(inst.surface, Vocab::max_numeral);
    if (!parsed || parsed->canonical != inst.canonical) {
        throw std::runtime_error("corpus record " + inst.id + ": surface does not parse to its canonical form");
    }
    inst.distractor_count = j.at("distractor_count").get<int>();
    if (parsed->distractor_count != inst.distractor_count) {
        throw std::runtime_error("corpus record " + inst.id + ": distractor count disagrees with the surface");
    }
    if (!j.at("cluster_label").is_null()) {
        inst.cluster_label = j.at("cluster_label").get<int>();
    }
    return inst;
}

void write_jsonl(const std::string& path, std::span<const ProblemInstance> items) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    for (const auto& inst : items) {
        out << to_jsonl(inst) << '\n';
    }
}

std::vector<ProblemInstance> read_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot read " + path);
    }
    std::vector<ProblemInstance> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            out.push_back(from_jsonl(line));
        }
    }
    return out;
}

}  // namespace durit
