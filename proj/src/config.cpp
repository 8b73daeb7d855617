#include "durit/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <variant>
#include <vector>

namespace durit {

namespace {

using Slot = std::variant<int*, double*, std::uint64_t*, std::string*, std::vector<int>*>;

struct Field {
    std::string key;
    Slot slot;
    const char* note;  // "decided" marks values chosen here rather than taken from the method
};

void add_model(std::vector<Field>& f, const std::string& p, ModelConfig& m) {
    f.push_back({p + ".d_model", &m.d_model, "decided"});
    f.push_back({p + ".n_layers", &m.n_layers, "decided"});
    f.push_back({p + ".n_heads", &m.n_heads, "decided"});
    f.push_back({p + ".d_ff", &m.d_ff, "decided"});
    f.push_back({p + ".max_context", &m.max_context, "decided"});
    f.push_back({p + ".init_std", &m.init_std, "decided"});
}

void add_grpo(std::vector<Field>& f, const std::string& p, GrpoConfig& g) {
    f.push_back({p + ".group_size", &g.group_size, ""});
    f.push_back({p + ".clip_eps", &g.clip_eps, "decided"});
    f.push_back({p + ".kl_coef", &g.kl_coef, ""});
    f.push_back({p + ".lr", &g.lr, "decided"});
    f.push_back({p + ".batch_size", &g.batch_size, "decided"});
    f.push_back({p + ".epochs", &g.epochs, ""});
    f.push_back({p + ".temperature", &g.temperature, ""});
    f.push_back({p + ".max_new_tokens", &g.max_new_tokens, "decided"});
    f.push_back({p + ".grad_clip", &g.grad_clip, "decided"});
}

std::vector<Field> fields(PipelineConfig& c) {
    std::vector<Field> f;
    f.push_back({"corpus.n_skeletons", &c.corpus.n_skeletons, "decided"});
    f.push_back({"corpus.operand_min", &c.corpus.operand_min, "decided"});
    f.push_back({"corpus.operand_max", &c.corpus.operand_max, "decided"});
    f.push_back({"corpus.max_value", &c.corpus.max_value, "decided"});
    f.push_back({"corpus.styles", &c.corpus.styles, "decided: 0 bare, 1 story, 2 verbose story"});
    f.push_back({"corpus.distractor_rate", &c.corpus.distractor_rate, "decided"});
    f.push_back({"corpus.max_distractors", &c.corpus.max_distractors, "decided"});
    f.push_back({"corpus.n_train", &c.corpus.n_train, "decided"});
    f.push_back({"corpus.n_test", &c.corpus.n_test, "decided"});
    add_model(f, "mapper", c.mapper);
    add_model(f, "reasoner", c.reasoner);
    f.push_back({"warmup.reasoner_examples", &c.warmup.reasoner_examples, "decided, 0 = all"});
    f.push_back({"warmup.reasoner_epochs", &c.warmup.reasoner_epochs, "decided"});
    f.push_back({"warmup.reasoner_lr", &c.warmup.reasoner_lr, "decided"});
    f.push_back({"warmup.mapper_examples", &c.warmup.mapper_examples, "0 = all"});
    f.push_back({"warmup.mapper_epochs", &c.warmup.mapper_epochs, "decided"});
    f.push_back({"warmup.mapper_lr", &c.warmup.mapper_lr, "decided"});
    f.push_back({"warmup.batch_size", &c.warmup.batch_size, "decided"});
    f.push_back({"codebook.size", &c.codebook_size, ""});
    f.push_back({"codebook.tau_sim", &c.tau_sim, "decided"});
    add_grpo(f, "step1", c.step1);
    f.push_back({"step1.subset", &c.step1_subset, "decided, 0 = all"});
    f.push_back({"step1.reward_samples", &c.reward_samples, ""});
    f.push_back({"step1.reward_temperature", &c.reward_temperature, ""});
    f.push_back({"step2.lambda", &c.step2.lambda, ""});
    f.push_back({"step2.tau", &c.step2.tau, "decided"});
    f.push_back({"step2.samples", &c.step2.samples, "decided"});
    f.push_back({"step2.max_per_instance", &c.step2.max_per_instance, "decided"});
    f.push_back({"step2.epochs", &c.step2.epochs, ""});
    f.push_back({"step2.lr", &c.step2.lr, ""});
    f.push_back({"step2.batch_size", &c.step2.batch_size, "decided"});
    f.push_back({"step2.temperature", &c.step2.temperature, ""});
    f.push_back({"step2.max_new_tokens", &c.step2.max_new_tokens, "decided"});
    f.push_back({"step2.subset", &c.step2_subset, "decided, 0 = all"});
    add_grpo(f, "step3", c.step3);
    f.push_back({"step3.subset", &c.step3_subset, "decided, 0 = all"});
    f.push_back({"loss.alpha1", &c.alpha1, ""});
    f.push_back({"loss.alpha2", &c.alpha2, ""});
    f.push_back({"pipeline.iterations", &c.iterations, "decided"});
    f.push_back({"pipeline.mapper_max_new_tokens", &c.mapper_max_new_tokens, "decided"});
    f.push_back({"pipeline.eval_max_new_tokens", &c.eval_max_new_tokens, "decided"});
    f.push_back({"pipeline.seed", &c.seed, ""});
    f.push_back({"pipeline.out_dir", &c.out_dir, ""});
    return f;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(std::string_view key, std::string_view v) {
    T out{};
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
        throw std::invalid_argument("config: bad value '" + std::string(v) + "' for " +
                                    std::string(key));
    }
    return out;
}

// Shortest text that reads back to the same double.
std::string format_double(double x) {
    char buf[40];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, end);
}

std::string value_text(const Slot& slot) {
    return std::visit(
        [](auto* p) -> std::string {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, double>) {
                return format_double(*p);
            } else if constexpr (std::is_same_v<T, std::string>) {
                return *p;
            } else if constexpr (std::is_same_v<T, std::vector<int>>) {
                std::string s;
                for (std::size_t i = 0; i < p->size(); ++i) {
                    s += (i ? "," : "") + std::to_string((*p)[i]);
                }
                return s;
            } else {
                return std::to_string(*p);
            }
        },
        slot);
}

void assign(const Field& f, std::string_view v) {
    std::visit(
        [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, std::string>) {
                *p = std::string(v);
            } else if constexpr (std::is_same_v<T, std::vector<int>>) {
                p->clear();
                std::size_t start = 0;
                while (start <= v.size()) {
                    const auto comma = v.find(',', start);
                    const auto end = comma == std::string_view::npos ? v.size() : comma;
                    p->push_back(parse_number<int>(f.key, trim(v.substr(start, end - start))));
                    if (comma == std::string_view::npos) {
                        break;
                    }
                    start = comma + 1;
                }
            } else {
                *p = parse_number<T>(f.key, v);
            }
        },
        f.slot);
}

}  // namespace

PipelineConfig default_config() {
    PipelineConfig c;
    c.mapper.vocab_size = vocab().size();
    c.reasoner.vocab_size = vocab().size();
    c.step1.epochs = 1;
    c.step1.max_new_tokens = 48;
    c.step3.epochs = 3;
    c.step3.max_new_tokens = 28;
    return c;
}

void validate(const PipelineConfig& c) {
    validate(c.corpus);
    validate(c.mapper);
    validate(c.reasoner);
    validate(c.step1);
    validate(c.step2);
    validate(c.step3);
    if (c.mapper.vocab_size != vocab().size() || c.reasoner.vocab_size != vocab().size()) {
        throw std::invalid_argument("config: model vocabulary must match the corpus vocabulary");
    }
    const auto& w = c.warmup;
    if (w.reasoner_examples < 0 || w.reasoner_epochs < 0 || !(w.reasoner_lr > 0.0) ||
        w.mapper_examples < 0 || w.mapper_epochs < 0 || !(w.mapper_lr > 0.0) || w.batch_size < 1) {
        throw std::invalid_argument("config: invalid warm-up setting");
    }
    if (c.codebook_size < 1 || !(c.tau_sim > 0.0)) {
        throw std::invalid_argument("config: codebook size and tau_sim must be positive");
    }
    if (c.codebook_size > c.corpus.n_train) {
        throw std::invalid_argument("config: more templates than training instances");
    }
    if (c.step1_subset < 0 || c.step2_subset < 0 || c.step3_subset < 0) {
        throw std::invalid_argument("config: subsets must be nonnegative");
    }
    if (c.reward_samples < 1 || !(c.reward_temperature > 0.0)) {
        throw std::invalid_argument("config: invalid reward sampling setting");
    }
    if (c.alpha1 < 0.0 || c.alpha2 < 0.0) {
        throw std::invalid_argument("config: loss weights must be nonnegative");
    }
    if (c.iterations < 0 || c.mapper_max_new_tokens < 1 || c.eval_max_new_tokens < 1) {
        throw std::invalid_argument("config: invalid iteration count or decode length");
    }
    if (c.out_dir.empty()) {
        throw std::invalid_argument("config: out_dir must be set");
    }
}

void set_config_value(PipelineConfig& cfg, std::string_view key, std::string_view value) {
    for (const Field& f : fields(cfg)) {
        if (f.key == key) {
            assign(f, value);
            return;
        }
    }
    throw std::invalid_argument("config: unknown key '" + std::string(key) + "'");
}

PipelineConfig parse_config(std::string_view text, const PipelineConfig& base) {
    PipelineConfig cfg = base;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        std::string_view line =
            text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        const std::string t = trim(line);
        if (t.empty()) {
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": expected 'key = value'");
        }
        try {
            set_config_value(cfg, trim(std::string_view(t).substr(0, eq)),
                             trim(std::string_view(t).substr(eq + 1)));
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("config line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    validate(cfg);
    return cfg;
}

PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open config " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string render_config(const PipelineConfig& cfg) {
    PipelineConfig copy = cfg;
    std::string out;
    std::string section;
    for (const Field& f : fields(copy)) {
        const std::string sec = f.key.substr(0, f.key.find('.'));
        if (sec != section) {
            if (!section.empty()) {
                out += '\n';
            }
            section = sec;
        }
        std::string line = f.key + " = " + value_text(f.slot);
        if (*f.note) {
            line.resize(std::max<std::size_t>(line.size() + 1, 44), ' ');
            line += std::string("# ") + f.note;
        }
        out += line + '\n';
    }
    return out;
}

std::string canonical_config(const PipelineConfig& cfg) {
    PipelineConfig copy = cfg;
    std::vector<std::string> lines;
    for (const Field& f : fields(copy)) {
        if (f.key == "pipeline.out_dir") {
            continue;
        }
        lines.push_back(f.key + "=" + value_text(f.slot));
    }
    std::sort(lines.begin(), lines.end());
    std::string out;
    for (const std::string& l : lines) {
        out += l + '\n';
    }
    return out;
}

std::uint64_t config_hash(const PipelineConfig& cfg) {
    return fnv1a(canonical_config(cfg));
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace durit
