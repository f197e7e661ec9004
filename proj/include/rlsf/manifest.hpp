#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace rlsf {

/// Lowercase hex SHA-256 of a file's bytes. Throws MissingArtifactError if unreadable.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_text(const std::string& text);

struct StageRecord {
    std::string params_hash;
    std::map<std::string, std::string> inputs;   // file name -> sha256
    std::map<std::string, std::string> outputs;  // file name -> sha256
    std::string started;
    std::string finished;

    bool operator==(const StageRecord&) const = default;
};

/// Per-run bookkeeping stored as manifest.json in the output directory.
struct Manifest {
    std::string tool_version;
    std::string config_hash;
    std::map<std::string, StageRecord> stages;

    static Manifest load(const std::filesystem::path& path);  // empty manifest when absent
    void save(const std::filesystem::path& path) const;

    /// True when `stage` last ran with `params_hash`, its recorded inputs
    /// still hash the same, and its outputs are present and unchanged.
    bool up_to_date(const std::string& stage, const std::string& params_hash,
                    const std::filesystem::path& dir) const;
};

/// Exclusive lock file; removed on destruction. Throws if already held.
class DirectoryLock {
public:
    explicit DirectoryLock(const std::filesystem::path& dir);
    ~DirectoryLock();
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    std::filesystem::path path_;
};

std::string utc_timestamp();

}  // namespace rlsf
