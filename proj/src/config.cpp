#include "rlsf/config.hpp"

#include <charconv>
#include <concepts>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace rlsf {
namespace {

namespace pt = boost::property_tree;

// Shortest text that parses back to the same double.
std::string format(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}
std::string format(bool v) { return v ? "true" : "false"; }
template <std::integral T>
std::string format(T v) {
    return std::to_string(v);
}
std::string format(const std::string& v) { return v; }
std::string format(PairingStrategy v) { return std::string(to_string(v)); }
std::string format(ConfidenceAggregation v) { return std::string(to_string(v)); }

template <class T>
T parse(const std::string& key, const std::string& text) {
    std::istringstream in(text);
    T v{};
    in >> v;
    if (!in || !(in >> std::ws).eof()) throw ConfigError("bad value '" + text + "' for " + key);
    return v;
}
template <>
bool parse<bool>(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("bad boolean '" + text + "' for " + key);
}
template <>
std::string parse<std::string>(const std::string&, const std::string& text) {
    return text;
}
template <>
PairingStrategy parse<PairingStrategy>(const std::string& key, const std::string& text) {
    try {
        return pairing_strategy_from_string(text);
    } catch (const ParseError&) {
        throw ConfigError("bad pairing strategy '" + text + "' for " + key);
    }
}

template <>
ConfidenceAggregation parse<ConfidenceAggregation>(const std::string& key, const std::string& text) {
    try {
        return confidence_aggregation_from_string(text);
    } catch (const ParseError&) {
        throw ConfigError("bad confidence aggregation '" + text + "' for " + key);
    }
}

struct Field {
    std::string section;
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
    bool reference_default = false;  // method reference value; deviations are reported
};

template <class Access>
Field field(std::string section, std::string key, Access access, bool reference_default = false) {
    Field f;
    f.section = section;
    f.key = key;
    f.get = [access](const RunConfig& c) { return format(access(c)); };
    f.set = [access, name = section + "." + key](RunConfig& c, const std::string& text) {
        using T = std::remove_cvref_t<decltype(access(c))>;
        access(c) = parse<T>(name, text);
    };
    f.reference_default = reference_default;
    return f;
}

#define RLSF_FIELD(section, key, member, ...) \
    field(section, key, [](auto& c) -> auto& { return c.member; } __VA_OPT__(, ) __VA_ARGS__)

const std::vector<Field>& fields() {
    static const std::vector<Field> all = {
        RLSF_FIELD("run", "seed", seed),
        RLSF_FIELD("run", "output_dir", output_dir),
        RLSF_FIELD("corpus", "sft_examples", corpus.sft_examples),
        RLSF_FIELD("corpus", "reasoning_ratio", corpus.reasoning_ratio),
        RLSF_FIELD("corpus", "mix_d1", corpus.mix.arithmetic_d1),
        RLSF_FIELD("corpus", "mix_d2", corpus.mix.arithmetic_d2),
        RLSF_FIELD("corpus", "mix_d3", corpus.mix.arithmetic_d3),
        RLSF_FIELD("corpus", "mix_mc", corpus.mix.multiple_choice),
        RLSF_FIELD("corpus", "choice_count", corpus.mix.choice_count),
        RLSF_FIELD("corpus", "max_operand", corpus.mix.max_operand),
        RLSF_FIELD("corpus", "pref_prompts", corpus.pref_prompts),
        RLSF_FIELD("corpus", "eval_prompts", corpus.eval_prompts),
        RLSF_FIELD("corpus", "bench_prompts", corpus.bench_prompts),
        RLSF_FIELD("model", "layers", model.layers),
        RLSF_FIELD("model", "width", model.width),
        RLSF_FIELD("model", "heads", model.heads),
        RLSF_FIELD("model", "context", model.context),
        RLSF_FIELD("model", "mlp_width", model.mlp_width),
        RLSF_FIELD("sft", "lr", sft.lr, true),
        RLSF_FIELD("sft", "epochs", sft.epochs, true),
        RLSF_FIELD("sft", "batch_size", sft.batch_size),
        RLSF_FIELD("sft", "cosine_schedule", sft.cosine_schedule),
        RLSF_FIELD("cot", "k", cot.k, true),
        RLSF_FIELD("cot", "max_new_tokens", cot.max_new_tokens),
        RLSF_FIELD("cot", "probe_tokens", cot.probe_tokens),
        RLSF_FIELD("preference", "strategy", preference.strategy),
        RLSF_FIELD("preference", "min_gap", preference.min_gap),
        RLSF_FIELD("reward", "lr", reward.lr, true),
        RLSF_FIELD("reward", "epochs", reward.epochs, true),
        RLSF_FIELD("reward", "batch_size", reward.batch_size),
        RLSF_FIELD("ppo", "lr", ppo.lr, true),
        RLSF_FIELD("ppo", "epochs", ppo.epochs, true),
        RLSF_FIELD("ppo", "temperature", ppo.temperature, true),
        RLSF_FIELD("ppo", "kl_coef", ppo.kl_coef, true),
        RLSF_FIELD("ppo", "clip", ppo.clip, true),
        RLSF_FIELD("ppo", "gamma", ppo.gamma, true),
        RLSF_FIELD("ppo", "lambda", ppo.lambda, true),
        RLSF_FIELD("ppo", "batch_size", ppo.batch_size),
        RLSF_FIELD("ppo", "minibatch_size", ppo.minibatch_size),
        RLSF_FIELD("ppo", "iterations", ppo.iterations),
        RLSF_FIELD("ppo", "max_new_tokens", ppo.max_new_tokens),
        RLSF_FIELD("ppo", "eval_interval", ppo.eval_interval),
        RLSF_FIELD("ppo", "normalize_advantages", ppo.normalize_advantages),
        RLSF_FIELD("dpo", "lr", dpo.lr, true),
        RLSF_FIELD("dpo", "epochs", dpo.epochs, true),
        RLSF_FIELD("dpo", "beta", dpo.beta, true),
        RLSF_FIELD("dpo", "label_smoothing", dpo.label_smoothing, true),
        RLSF_FIELD("dpo", "batch_size", dpo.batch_size),
        RLSF_FIELD("eval", "bins", eval.bins),
        RLSF_FIELD("eval", "confidence", eval.confidence),
    };
    return all;
}

#undef RLSF_FIELD

const Field* find_field(const std::string& section, const std::string& key) {
    for (const auto& f : fields()) {
        if (f.section == section && f.key == key) return &f;
    }
    return nullptr;
}

std::string render(const RunConfig& config, const std::set<std::string>* only) {
    std::string out;
    std::string current;
    for (const auto& f : fields()) {
        if (only && !only->contains(f.section)) continue;
        if (f.section != current) {
            if (!current.empty()) out += "\n";
            out += "[" + f.section + "]\n";
            current = f.section;
        }
        out += f.key + " = " + f.get(config) + "\n";
    }
    return out;
}

}  // namespace

void RunConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError(what);
    };
    require(corpus.sft_examples >= 1, "corpus.sft_examples must be >= 1");
    require(corpus.reasoning_ratio >= 0 && corpus.reasoning_ratio <= 1, "corpus.reasoning_ratio must lie in [0, 1]");
    const TaskMix& m = corpus.mix;
    require(m.arithmetic_d1 >= 0 && m.arithmetic_d2 >= 0 && m.arithmetic_d3 >= 0 && m.multiple_choice >= 0,
            "corpus mix weights must be >= 0");
    require(m.arithmetic_d1 + m.arithmetic_d2 + m.arithmetic_d3 + m.multiple_choice > 0,
            "corpus mix weights must not all be 0");
    require(m.choice_count >= 3 && m.choice_count <= 5, "corpus.choice_count must lie in [3, 5]");
    require(m.max_operand >= 1 && m.max_operand <= 99, "corpus.max_operand must lie in [1, 99]");
    require(corpus.pref_prompts >= 1 && corpus.eval_prompts >= 1 && corpus.bench_prompts >= 1,
            "corpus prompt counts must be >= 1");
    try {
        ModelConfig full = model;
        full.vocab_size = Vocabulary::character_level().size();
        full.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    require(sft.lr > 0 && sft.epochs >= 1 && sft.batch_size >= 1, "sft.lr > 0, sft.epochs >= 1, sft.batch_size >= 1");
    require(cot.k >= 1 && cot.k <= Vocabulary::character_level().size(), "cot.k must lie in [1, vocabulary size]");
    require(cot.max_new_tokens >= 1 && cot.probe_tokens >= 1, "cot token budgets must be >= 1");
    require(preference.min_gap >= 0, "preference.min_gap must be >= 0");
    require(reward.lr > 0 && reward.epochs >= 1 && reward.batch_size >= 1,
            "reward.lr > 0, reward.epochs >= 1, reward.batch_size >= 1");
    require(eval.bins >= 1, "eval.bins must be >= 1");
    ppo.validate();
    dpo.validate();
}

std::string to_ini(const RunConfig& config) { return render(config, nullptr); }

RunConfig from_ini(const std::string& text) {
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    RunConfig config;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
        for (const auto& [key, value] : body) {
            const Field* f = find_field(section, key);
            if (!f) throw ConfigError("config: unknown key " + section + "." + key);
            f->set(config, value.data());
        }
    }
    config.ppo.seed = config.seed;
    config.dpo.seed = config.seed;
    config.reward.seed = config.seed;
    return config;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig c = from_ini(ss.str());
    c.validate();
    return c;
}

void save_config(const std::filesystem::path& path, const RunConfig& config) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << to_ini(config);
}

void apply_override(RunConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
        throw ConfigError("override must look like section.key=value: '" + assignment + "'");
    }
    const std::string section = assignment.substr(0, dot);
    const std::string key = assignment.substr(dot + 1, eq - dot - 1);
    const Field* f = find_field(section, key);
    if (!f) throw ConfigError("unknown config key " + section + "." + key);
    f->set(config, assignment.substr(eq + 1));
    config.ppo.seed = config.dpo.seed = config.reward.seed = config.seed;
}

std::vector<std::string> default_mismatches(const RunConfig& config) {
    const RunConfig defaults;
    std::vector<std::string> out;
    for (const auto& f : fields()) {
        if (!f.reference_default) continue;
        const std::string have = f.get(config);
        const std::string want = f.get(defaults);
        if (have != want) out.push_back(f.section + "." + f.key + ": " + have + " (default " + want + ")");
    }
    return out;
}

std::string section_text(const RunConfig& config, const std::vector<std::string>& sections) {
    const std::set<std::string> only(sections.begin(), sections.end());
    return render(config, &only);
}

}  // namespace rlsf
