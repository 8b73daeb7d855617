#include <cctype>
#include <cstdio>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "durit/corpus.hpp"

using namespace durit;

namespace {

// Independent recursive-descent evaluator for the canonical strings, with
// ordinary precedence. Canonical strings are fully parenthesised, so this
// must agree with the left-to-right chain semantics.
struct Expr {
    std::string s;
    std::size_t i = 0;

    long long parse_sum() {
        long long v = parse_product();
        while (i < s.size() && (s[i] == '+' || s[i] == '-')) {
            const char op = s[i++];
            const long long r = parse_product();
            v = op == '+' ? v + r : v - r;
        }
        return v;
    }
    long long parse_product() {
        long long v = parse_atom();
        while (i < s.size() && s[i] == '*') {
            ++i;
            v *= parse_atom();
        }
        return v;
    }
    long long parse_atom() {
        if (s[i] == '(') {
            ++i;
            const long long v = parse_sum();
            ++i;  // ')'
            return v;
        }
        long long v = 0;
        while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) {
            v = v * 10 + (s[i++] - '0');
        }
        return v;
    }
};

long long eval_string(const std::string& s) {
    Expr e{s};
    return e.parse_sum();
}

CorpusSpec small_spec(std::uint64_t seed = 5) {
    CorpusSpec spec;
    spec.operand_max = 9;
    spec.max_value = 30;
    spec.n_train = 400;
    spec.n_test = 60;
    spec.seed = seed;
    return spec;
}

std::vector<int> enc(const char* text) { return vocab().encode(text); }

ProblemInstance instance_of(const char* canonical) {
    ProblemInstance inst;
    inst.id = "x";
    inst.canonical = *parse_canonical_string(canonical);
    inst.surface = canonical_rendering(inst.canonical);
    return inst;
}

}  // namespace

TEST_CASE("canonical strings and chain evaluation") {
    const auto c = parse_canonical_string("((3+4)*2)");
    REQUIRE(c);
    CHECK(c->answer == 14);
    CHECK(c->to_string() == "((3+4)*2)");
    CHECK(skeleton_ops(c->skeleton_id) == std::vector<Op>{Op::add, Op::mul});
    const std::vector<int> small{3, 8};
    const std::vector<Op> minus{Op::sub};
    CHECK_FALSE(evaluate_chain(small, minus, 30));
    const std::vector<int> big{9, 9};
    const std::vector<Op> times{Op::mul};
    CHECK_FALSE(evaluate_chain(big, times, 30));
    CHECK(evaluate_chain(big, times, 99) == 81);
}

TEST_CASE("generated instances re-evaluate under an independent evaluator") {
    const Corpus c = generate_corpus(small_spec());
    CHECK(c.train.size() == 400);
    CHECK(c.test_orig.size() == 60);
    CHECK(c.test_perturbed.size() == 60);
    std::set<std::string> train_keys, test_keys, pert_keys;
    auto check_split = [](const std::vector<ProblemInstance>& split, std::set<std::string>& keys) {
        for (const ProblemInstance& inst : split) {
            const std::string s = inst.canonical.to_string();
            keys.insert(s);
            CHECK(eval_string(s) == inst.canonical.answer);
            CHECK(evaluate_chain(inst.canonical.operands, inst.canonical.ops, 30) == inst.canonical.answer);
            const auto parsed = parse_surface(inst.surface, 30);
            REQUIRE(parsed);
            CHECK(parsed->canonical == inst.canonical);
            CHECK(parsed->distractor_count == inst.distractor_count);
            for (int v : inst.canonical.operands) {
                CHECK(v >= 2);
                CHECK(v <= 9);
            }
        }
    };
    check_split(c.train, train_keys);
    check_split(c.test_orig, test_keys);
    check_split(c.test_perturbed, pert_keys);
    // A perturbation may land on another test problem, but training never
    // sees either test split.
    for (const std::string& k : train_keys) {
        CHECK(test_keys.count(k) == 0);
        CHECK(pert_keys.count(k) == 0);
    }
    for (std::size_t i = 0; i < c.test_orig.size(); ++i) {
        CHECK(c.test_perturbed[i].lineage == c.test_orig[i].id);
        CHECK(c.test_perturbed[i].canonical.skeleton_id == c.test_orig[i].canonical.skeleton_id);
    }
}

TEST_CASE("corpus generation is deterministic") {
    const Corpus a = generate_corpus(small_spec(8));
    const Corpus b = generate_corpus(small_spec(8));
    REQUIRE(a.train.size() == b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(to_jsonl(a.train[i]) == to_jsonl(b.train[i]));
    }
    for (std::size_t i = 0; i < a.test_perturbed.size(); ++i) {
        CHECK(to_jsonl(a.test_perturbed[i]) == to_jsonl(b.test_perturbed[i]));
    }
}

TEST_CASE("distractor rate zero produces no distractors") {
    CorpusSpec spec = small_spec();
    spec.distractor_rate = 0.0;
    const Corpus c = generate_corpus(spec);
    for (const auto* split : {&c.train, &c.test_orig, &c.test_perturbed}) {
        for (const ProblemInstance& inst : *split) {
            CHECK(inst.distractor_count == 0);
            CHECK(parse_surface(inst.surface, 30)->distractor_count == 0);
        }
    }
}

TEST_CASE("renderings") {
    const CanonicalForm c = *parse_canonical_string("((3+4)*2)");
    Rng rng = make_rng(1);
    CHECK(vocab().decode(render_surface(c, 0, 0, rng)) == "compute : 3 plus 4 then times 2 .");
    CHECK(canonical_rendering(c) == render_surface(c, 0, 0, rng));

    const std::vector<int> story = render_surface(c, 1, 1, rng);
    const auto parsed = parse_surface(story);
    REQUIRE(parsed);
    CHECK(parsed->distractor_count == 1);
    CHECK(parsed->canonical == c);

    for (int style = 0; style < kNumStyles; ++style) {
        for (int other = style + 1; other < kNumStyles; ++other) {
            const auto a = render_surface(c, style, 0, rng);
            const auto b = render_surface(c, other, 0, rng);
            CHECK(a != b);
            CHECK(parse_surface(a)->canonical == parse_surface(b)->canonical);
        }
    }
    CHECK_FALSE(parse_surface(enc("compute : 3 plus then times 2 .")));
}

TEST_CASE("perturbation keeps the skeleton and re-evaluates exactly") {
    const CorpusSpec spec = small_spec();
    ProblemInstance inst = instance_of("((3+4)*2)");
    Rng rng = make_rng(12);
    int same_operands = 0;
    for (int i = 0; i < 300; ++i) {
        const ProblemInstance p = perturb_instance(inst, spec, rng);
        CHECK(p.canonical.skeleton_id == inst.canonical.skeleton_id);
        CHECK(p.lineage == inst.id);
        CHECK(eval_string(p.canonical.to_string()) == p.canonical.answer);
        CHECK(parse_surface(p.surface, 30)->canonical == p.canonical);
        if (p.canonical.operands == inst.canonical.operands) {
            ++same_operands;
            CHECK(p.canonical.answer == inst.canonical.answer);
        }
    }
    CHECK(same_operands < 300);
}

TEST_CASE("answer extraction") {
    CHECK(extract_answer(enc("it is 42 . #### 42")) == 42);
    CHECK_FALSE(extract_answer(enc("it is 42 .")));
    CHECK(extract_answer(enc("#### 7 . #### 9")) == 9);
    CHECK_FALSE(extract_answer(enc("it is 42 . ####")));

    const ProblemInstance inst = instance_of("((3+4)*2)");
    CHECK(is_correct(enc("7 times 2 is 14 . #### 14"), inst));
    CHECK_FALSE(is_correct(enc("7 times 2 is 15 . #### 15"), inst));
    CHECK_FALSE(is_correct(enc("7 times 2 is 14 ."), inst));
    std::vector<int> with_eos = enc("#### 14");
    with_eos.push_back(vocab().eos());
    CHECK(is_correct(with_eos, inst));
}

TEST_CASE("reference solutions are correct") {
    const Corpus c = generate_corpus(small_spec());
    for (const ProblemInstance& inst : c.train) {
        CHECK(is_correct(reference_solution(inst.canonical), inst));
    }
}

TEST_CASE("leak detection") {
    const ProblemInstance inst = instance_of("((3+4)*2)");
    CHECK(detect_leak(inst, enc("compute : 3 plus 4 then times 2 . 14")));
    CHECK(detect_leak(inst, enc("compute : 3 plus 4 then times 2 . fourteen")));
    CHECK_FALSE(detect_leak(inst, enc("compute : 3 plus 4 then times 2 . 3 4")));
    CHECK(detect_leak(inst, enc("compute : 3 plus 4 #### 1")));
    CHECK_FALSE(detect_leak(inst, inst.surface));

    // A faithful canonical rendering only repeats numbers the original
    // already shows, so it never counts as a leak.
    const Corpus c = generate_corpus(small_spec(3));
    for (const ProblemInstance& x : c.train) {
        CHECK_FALSE(detect_leak(x, x.surface));
        CHECK_FALSE(detect_leak(x, canonical_rendering(x.canonical)));
    }
}

TEST_CASE("prompt layouts") {
    const std::vector<int> q = enc("compute : 3 plus 4 .");
    const auto r = reasoner_prompt(q);
    CHECK(r.front() == vocab().bos());
    CHECK(r.back() == vocab().sep());
    CHECK(r.size() == q.size() + 2);
    const auto m = mapper_prompt(q);
    CHECK(m.size() == q.size() + 3);
    CHECK(m[static_cast<std::size_t>(template_position(q))] == vocab().tpl());
    std::vector<int> y = q;
    y.push_back(vocab().eos());
    CHECK(strip_eos(y) == q);
    CHECK(strip_eos(q) == q);
}

TEST_CASE("jsonl round trip") {
    const Corpus c = generate_corpus(small_spec());
    std::vector<ProblemInstance> items(c.test_perturbed.begin(), c.test_perturbed.begin() + 10);
    items[3].cluster_label = 7;
    for (const ProblemInstance& inst : items) {
        const ProblemInstance back = from_jsonl(to_jsonl(inst));
        CHECK(back.id == inst.id);
        CHECK(back.split == inst.split);
        CHECK(back.canonical == inst.canonical);
        CHECK(back.surface == inst.surface);
        CHECK(back.style_id == inst.style_id);
        CHECK(back.distractor_count == inst.distractor_count);
        CHECK(back.cluster_label == inst.cluster_label);
        CHECK(back.lineage == inst.lineage);
    }
    const std::string path =
        (std::filesystem::temp_directory_path() / "durit_test_roundtrip.jsonl").string();
    write_jsonl(path, items);
    const auto read = read_jsonl(path);
    REQUIRE(read.size() == items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        CHECK(to_jsonl(read[i]) == to_jsonl(items[i]));
    }
    std::filesystem::remove(path);
    CHECK_THROWS(from_jsonl("{\"id\": 3}"));
}
