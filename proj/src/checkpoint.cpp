#include "rlsf/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "rlsf/common.hpp"
#include "rlsf/policy.hpp"

namespace rlsf {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[8] = {'R', 'L', 'S', 'F', 'C', 'K', 'P', 'T'};

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot write " + path.string());
    }
    template <typename T>
    void pod(T v) {
        out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void str(const std::string& s) {
        pod(static_cast<std::uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    void doubles(const std::vector<double>& xs) {
        pod(static_cast<std::uint64_t>(xs.size()));
        out_.write(reinterpret_cast<const char*>(xs.data()), static_cast<std::streamsize>(xs.size() * sizeof(double)));
    }
    void raw(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
    void finish() {
        out_.flush();
        if (!out_) throw std::runtime_error("checkpoint write failed");
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path.string()) {
        if (!in_) throw MissingArtifactError("cannot open checkpoint " + path.string());
    }
    template <typename T>
    T pod() {
        T v{};
        read(reinterpret_cast<char*>(&v), sizeof(T));
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint32_t>();
        if (n > (1u << 20)) fail("string field too long");
        std::string s(n, '\0');
        read(s.data(), n);
        return s;
    }
    std::vector<double> doubles() {
        const auto n = pod<std::uint64_t>();
        if (n > (std::uint64_t{1} << 32)) fail("array field too long");
        std::vector<double> xs(n);
        read(reinterpret_cast<char*>(xs.data()), n * sizeof(double));
        return xs;
    }
    void read(char* p, std::size_t n) {
        in_.read(p, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) fail("truncated checkpoint");
    }
    [[noreturn]] void fail(const std::string& what) { throw ParseError(path_ + ": " + what); }

private:
    std::ifstream in_;
    std::string path_;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    Writer w(path);
    w.raw(kMagic, sizeof(kMagic));
    w.pod(Checkpoint::kVersion);
    w.pod(static_cast<std::uint32_t>(c.kind));
    for (int v : {c.config.layers, c.config.width, c.config.heads, c.config.context, c.config.vocab_size,
                  c.config.mlp_width}) {
        w.pod(static_cast<std::int32_t>(v));
    }
    w.pod(c.step);
    w.str(c.rng_state);
    w.pod(static_cast<std::uint32_t>(c.vocabulary.size()));
    for (const auto& t : c.vocabulary) w.str(t);
    w.doubles(c.params);
    w.doubles(c.head);
    w.pod(static_cast<std::uint8_t>(c.scale ? 1 : 0));
    w.pod(c.scale ? c.scale->first : 0.0);
    w.pod(c.scale ? c.scale->second : 0.0);
    w.finish();
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    Reader r(path);
    char magic[8];
    r.read(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) r.fail("not a checkpoint (bad magic)");
    const auto version = r.pod<std::uint32_t>();
    if (version != Checkpoint::kVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    const auto kind = r.pod<std::uint32_t>();
    if (kind > 2) r.fail("unknown checkpoint kind");
    c.kind = static_cast<CheckpointKind>(kind);
    c.config.layers = r.pod<std::int32_t>();
    c.config.width = r.pod<std::int32_t>();
    c.config.heads = r.pod<std::int32_t>();
    c.config.context = r.pod<std::int32_t>();
    c.config.vocab_size = r.pod<std::int32_t>();
    c.config.mlp_width = r.pod<std::int32_t>();
    c.step = r.pod<std::uint64_t>();
    c.rng_state = r.str();
    const auto n_tokens = r.pod<std::uint32_t>();
    if (n_tokens > 65536) r.fail("vocabulary too large");
    for (std::uint32_t i = 0; i < n_tokens; ++i) c.vocabulary.push_back(r.str());
    c.params = r.doubles();
    c.head = r.doubles();
    const auto has_scale = r.pod<std::uint8_t>();
    const auto lo = r.pod<double>();
    const auto hi = r.pod<double>();
    if (has_scale) c.scale = std::make_pair(lo, hi);
    return c;
}

Checkpoint to_checkpoint(const Policy& policy) {
    Checkpoint c;
    c.kind = CheckpointKind::Policy;
    c.config = policy.model.config();
    c.step = policy.step;
    c.rng_state = policy.rng_state;
    c.vocabulary = policy.vocab.tokens();
    c.params.assign(policy.model.params().begin(), policy.model.params().end());
    return c;
}

Policy policy_from_checkpoint(const Checkpoint& c) {
    Vocabulary vocab(c.vocabulary);
    if (vocab.size() != c.config.vocab_size) throw ParseError("checkpoint vocabulary size mismatch");
    Transformer model(c.config);
    if (model.param_count() != c.params.size()) throw ParseError("checkpoint parameter count mismatch");
    std::copy(c.params.begin(), c.params.end(), model.params().begin());
    return Policy{std::move(vocab), std::move(model), c.step, c.rng_state};
}

void save_policy(const std::filesystem::path& path, const Policy& policy) {
    write_checkpoint(path, to_checkpoint(policy));
}

Policy load_policy(const std::filesystem::path& path) {
    const Checkpoint c = read_checkpoint(path);
    if (c.kind != CheckpointKind::Policy) throw ParseError(path.string() + " is not a policy checkpoint");
    return policy_from_checkpoint(c);
}

}  // namespace rlsf
