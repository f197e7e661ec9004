#include "rlsf/manifest.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <memory>

#include <json.hpp>
#include <openssl/evp.h>

#include "rlsf/common.hpp"

namespace rlsf {
namespace {

using Json = nlohmann::ordered_json;

class Digest {
public:
    Digest() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
    }
    void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), md, &len);
        static const char* digits = "0123456789abcdef";
        std::string out;
        for (unsigned i = 0; i < len; ++i) {
            out += digits[md[i] >> 4];
            out += digits[md[i] & 15];
        }
        return out;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

Json to_json(const std::map<std::string, std::string>& m) {
    Json j = Json::object();
    for (const auto& [k, v] : m) j[k] = v;
    return j;
}

std::map<std::string, std::string> from_json(const Json& j) {
    std::map<std::string, std::string> m;
    for (const auto& [k, v] : j.items()) m[k] = v.get<std::string>();
    return m;
}

}  // namespace

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot read " + path.string());
    Digest d;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        d.update(buf, static_cast<std::size_t>(in.gcount()));
    }
    return d.hex();
}

std::string sha256_text(const std::string& text) {
    Digest d;
    d.update(text.data(), text.size());
    return d.hex();
}

Manifest Manifest::load(const std::filesystem::path& path) {
    Manifest m;
    std::ifstream in(path);
    if (!in) return m;
    try {
        const Json j = Json::parse(in);
        m.tool_version = j.value("tool_version", "");
        m.config_hash = j.value("config_hash", "");
        for (const auto& [name, s] : j.at("stages").items()) {
            StageRecord r;
            r.params_hash = s.at("params_hash").get<std::string>();
            r.inputs = from_json(s.at("inputs"));
            r.outputs = from_json(s.at("outputs"));
            r.started = s.value("started", "");
            r.finished = s.value("finished", "");
            m.stages[name] = std::move(r);
        }
    } catch (const Json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return m;
}

void Manifest::save(const std::filesystem::path& path) const {
    Json j;
    j["tool_version"] = tool_version;
    j["config_hash"] = config_hash;
    Json stages_json = Json::object();
    for (const auto& [name, r] : stages) {
        stages_json[name] = Json{{"params_hash", r.params_hash},
                                 {"inputs", to_json(r.inputs)},
                                 {"outputs", to_json(r.outputs)},
                                 {"started", r.started},
                                 {"finished", r.finished}};
    }
    j["stages"] = stages_json;
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << j.dump(2) << '\n';
    }
    std::filesystem::rename(tmp, path);
}

bool Manifest::up_to_date(const std::string& stage, const std::string& params_hash,
                          const std::filesystem::path& dir) const {
    const auto it = stages.find(stage);
    if (it == stages.end() || it->second.params_hash != params_hash) return false;
    auto same = [&](const std::map<std::string, std::string>& files) {
        for (const auto& [name, hash] : files) {
            const auto p = dir / name;
            if (!std::filesystem::exists(p) || sha256_file(p) != hash) return false;
        }
        return true;
    };
    return same(it->second.inputs) && same(it->second.outputs);
}

DirectoryLock::DirectoryLock(const std::filesystem::path& dir) : path_(dir / ".rlsf.lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
        throw std::runtime_error("output directory " + dir.string() + " is locked by another run (remove " +
                                 path_.string() + " if stale)");
    }
    std::fclose(f);
}

DirectoryLock::~DirectoryLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace rlsf
