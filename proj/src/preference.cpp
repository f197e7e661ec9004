#include "rlsf/preference.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <tuple>

#include <json.hpp>

namespace rlsf {
namespace {

using Json = nlohmann::ordered_json;

bool text_safe(const Vocabulary& vocab, const TokenSeq& response) {
    for (std::size_t i = 0; i < response.size(); ++i) {
        if (vocab.is_special(response[i]) && !(i + 1 == response.size() && response[i] == vocab.eos())) return false;
    }
    return true;
}

TokenSeq terminated(const TokenSeq& response, TokenId eos) {
    TokenSeq out = response;
    if (out.empty() || out.back() != eos) out.push_back(eos);
    return out;
}

std::filesystem::path provenance_path(const std::filesystem::path& path) {
    return path.string() + ".provenance.json";
}

auto sort_key(const PreferencePair& p) { return std::make_tuple(p.prompt_id, p.k_chosen, p.k_rejected); }

}  // namespace

std::string_view to_string(PairingStrategy s) { return s == PairingStrategy::BestWorst ? "best_worst" : "all_pairs"; }

PairingStrategy pairing_strategy_from_string(std::string_view s) {
    if (s == "best_worst") return PairingStrategy::BestWorst;
    if (s == "all_pairs") return PairingStrategy::AllPairs;
    throw ParseError("unknown pairing strategy '" + std::string(s) + "'");
}

std::vector<ScoredHypothesis> rank_hypotheses(const std::vector<ScoredHypothesis>& scored) {
    std::vector<ScoredHypothesis> ranked;
    for (const auto& s : scored) {
        if (s.span && s.confidence) ranked.push_back(s);
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const ScoredHypothesis& a, const ScoredHypothesis& b) {
        if (*a.confidence != *b.confidence) return *a.confidence > *b.confidence;
        return a.hypothesis.branch_index < b.hypothesis.branch_index;
    });
    return ranked;
}

std::vector<std::pair<std::size_t, std::size_t>> select_pairs(const std::vector<ScoredHypothesis>& ranked,
                                                              PairingStrategy strategy, double min_gap) {
    if (!(min_gap >= 0.0)) throw ParameterError("min_gap must be non-negative");
    std::vector<std::pair<std::size_t, std::size_t>> out;
    if (ranked.size() < 2) return out;
    auto keep = [&](std::size_t i, std::size_t j) {
        const double gap = *ranked[i].confidence - *ranked[j].confidence;
        return gap >= min_gap && ranked[i].span->text != ranked[j].span->text;
    };
    if (strategy == PairingStrategy::BestWorst) {
        if (keep(0, ranked.size() - 1)) out.emplace_back(0, ranked.size() - 1);
        return out;
    }
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        for (std::size_t j = i + 1; j < ranked.size(); ++j) {
            if (keep(i, j)) out.emplace_back(i, j);
        }
    }
    return out;
}

std::vector<PreferencePair> build_pairs(const Vocabulary& vocab, std::uint64_t prompt_id,
                                        const std::string& prompt_text, const std::vector<ScoredHypothesis>& ranked,
                                        PairingStrategy strategy, double min_gap) {
    std::vector<PreferencePair> out;
    const TokenSeq prompt = [&] {
        TokenSeq p{vocab.bos()};
        const TokenSeq body = vocab.encode(prompt_text);
        p.insert(p.end(), body.begin(), body.end());
        return p;
    }();
    for (const auto& [i, j] : select_pairs(ranked, strategy, min_gap)) {
        const auto& a = ranked[i];
        const auto& b = ranked[j];
        if (!text_safe(vocab, a.hypothesis.tokens) || !text_safe(vocab, b.hypothesis.tokens)) continue;
        PreferencePair p;
        p.prompt_id = prompt_id;
        p.prompt_text = prompt_text;
        p.prompt = prompt;
        p.chosen = terminated(a.hypothesis.tokens, vocab.eos());
        p.rejected = terminated(b.hypothesis.tokens, vocab.eos());
        p.c_chosen = *a.confidence;
        p.c_rejected = *b.confidence;
        p.gap = p.c_chosen - p.c_rejected;
        p.k_chosen = a.hypothesis.branch_index;
        p.k_rejected = b.hypothesis.branch_index;
        out.push_back(std::move(p));
    }
    return out;
}

void canonicalize(PreferenceDataset& dataset) {
    auto& pairs = dataset.pairs;
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const PreferencePair& a, const PreferencePair& b) { return sort_key(a) < sort_key(b); });
    std::set<std::tuple<TokenSeq, TokenSeq, TokenSeq>> seen;
    std::erase_if(pairs, [&](const PreferencePair& p) { return !seen.insert({p.prompt, p.chosen, p.rejected}).second; });
}

void write_jsonl(const PreferenceDataset& dataset, const std::filesystem::path& path, const Vocabulary& vocab) {
    PreferenceDataset sorted = dataset;
    canonicalize(sorted);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& p : sorted.pairs) {
        Json j;
        j["prompt"] = p.prompt_text;
        j["chosen"] = vocab.decode(p.chosen);
        j["rejected"] = vocab.decode(p.rejected);
        j["gap"] = p.gap;
        j["meta"] = Json{{"k_chosen", p.k_chosen},
                         {"k_rejected", p.k_rejected},
                         {"c_chosen", p.c_chosen},
                         {"c_rejected", p.c_rejected},
                         {"prompt_id", p.prompt_id}};
        out << j.dump() << '\n';
    }
    std::ofstream prov(provenance_path(path), std::ios::binary);
    Json j{{"seed", dataset.provenance.seed}, {"k", dataset.provenance.k},
           {"checkpoint_id", dataset.provenance.checkpoint_id}};
    prov << j.dump(2) << '\n';
}

PreferenceDataset read_jsonl(const std::filesystem::path& path, const Vocabulary& vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open " + path.string());
    PreferenceDataset ds;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const Json j = Json::parse(line);
            PreferencePair p;
            p.prompt_text = j.at("prompt").get<std::string>();
            p.prompt = TokenSeq{vocab.bos()};
            const TokenSeq body = vocab.encode(p.prompt_text);
            p.prompt.insert(p.prompt.end(), body.begin(), body.end());
            p.chosen = terminated(vocab.encode(j.at("chosen").get<std::string>()), vocab.eos());
            p.rejected = terminated(vocab.encode(j.at("rejected").get<std::string>()), vocab.eos());
            p.gap = j.at("gap").get<double>();
            const Json& meta = j.at("meta");
            p.k_chosen = meta.at("k_chosen").get<int>();
            p.k_rejected = meta.at("k_rejected").get<int>();
            p.c_chosen = meta.at("c_chosen").get<double>();
            p.c_rejected = meta.at("c_rejected").get<double>();
            p.prompt_id = meta.at("prompt_id").get<std::uint64_t>();
            ds.pairs.push_back(std::move(p));
        } catch (const std::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    std::ifstream prov(provenance_path(path));
    if (prov) {
        try {
            const Json j = Json::parse(prov);
            ds.provenance.seed = j.at("seed").get<std::uint64_t>();
            ds.provenance.k = j.at("k").get<int>();
            ds.provenance.checkpoint_id = j.at("checkpoint_id").get<std::string>();
        } catch (const Json::exception& e) {
            throw ParseError(provenance_path(path).string() + ": " + e.what());
        }
    }
    return ds;
}

}  // namespace rlsf
