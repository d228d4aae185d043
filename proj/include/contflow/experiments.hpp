#ifndef CONTFLOW_EXPERIMENTS_HPP
#define CONTFLOW_EXPERIMENTS_HPP

#include <cstdint>
#include <exception>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace contflow::exp {

/// Process exit codes of the command-line runner.
enum class ExitCode : int {
    ok = 0,
    failure = 1,
    invalid_config = 2,
    divergence = 3,
    io_error = 4,
    verify_failed = 5,
};

/// Where a parameter default comes from: a published value, or a
/// choice made by this artifact.
enum class Source { paper, artifact };

struct ParamSpec {
    std::string key;
    nlohmann::json default_value;
    Source source = Source::artifact;
    std::string anchor;  // figure or section holding the stated value
    std::string help;
};

struct ExperimentInfo {
    std::string name;
    std::string description;
    std::string anchor;
    std::vector<ParamSpec> params;

    const ParamSpec* param(const std::string& key) const;
};

/// The ten registered experiments in a fixed order.
const std::vector<ExperimentInfo>& registry();
/// nullptr for an unknown name.
const ExperimentInfo* find_experiment(const std::string& name);
/// Tab-separated name, anchor and description, one experiment per line.
std::string list_text();

std::string version();

/// A validated run configuration. `params` holds every parameter of the
/// experiment, defaults filled in; `overrides` only the keys the user set.
struct Config {
    std::string experiment;
    std::uint64_t seed = 0;
    std::filesystem::path out_dir;
    nlohmann::json params;
    nlohmann::json overrides;
    nlohmann::json echo;
};

/// Accepts {"experiment", "out_dir", optional "seed", optional "params"}.
/// Unknown keys, unknown experiments, unknown parameters and values whose
/// type differs from the default's raise InvalidConfig. Relative out_dir
/// paths are kept as given and resolve against the working directory.
Config parse_config(const nlohmann::json& doc);
/// Reads and parses a configuration file; IoError when unreadable.
Config load_config(const std::filesystem::path& path);

/// Seed of an independent component stream: splitmix64(seed ^ fnv1a(component)).
std::uint64_t component_seed(std::uint64_t seed, std::string_view component);

struct Artifact {
    std::string name;
    std::string content;
};

struct RunResult {
    std::vector<Artifact> artifacts;
    /// Component streams drawn on, with their derived seeds.
    nlohmann::json seeds = nlohmann::json::object();
    /// Small scalar findings echoed into the manifest.
    nlohmann::json summary = nlohmann::json::object();
};

/// Runs the experiment in memory. Nothing is written, so a failing run
/// leaves no artifacts behind.
RunResult execute(const Config& cfg);

/// Writes the artifacts and manifest.json into cfg.out_dir and returns the
/// manifest.
nlohmann::json write_run(const Config& cfg, const RunResult& result, double wall_seconds);

/// execute followed by write_run, timed.
nlohmann::json run(const Config& cfg);

std::string sha256_hex(const std::string& bytes);

struct Check {
    enum class Status { pass, fail, skip };
    std::string name;
    Status status = Status::pass;
    std::string detail;
};

struct VerifyReport {
    std::string experiment;
    std::vector<Check> checks;

    bool passed() const;
    std::string table() const;
};

/// Recomputes the file hashes listed in dir/manifest.json and evaluates the
/// experiment's predicates from the emitted CSV files. IoError when the
/// manifest or a listed file is missing.
VerifyReport verify(const std::filesystem::path& dir);

/// Exit code and machine-readable description of an error.
ExitCode exit_code_for(const std::exception& e);
nlohmann::json error_json(const std::exception& e);

}  // namespace contflow::exp

#endif  // CONTFLOW_EXPERIMENTS_HPP
