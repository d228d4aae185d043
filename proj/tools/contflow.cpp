#include <exception>
#include <iostream>

#include "CLI11.hpp"
#include "contflow/errors.hpp"
#include "contflow/experiments.hpp"

namespace {

namespace exp = contflow::exp;

int fail(const std::exception& e) {
    const nlohmann::json err = exp::error_json(e);
    std::cerr << err.dump() << std::endl;
    return err.at("exit_code").get<int>();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"contflow: continuous-formulation experiment runner"};
    app.require_subcommand(1);

    std::string config_path;
    auto* run = app.add_subcommand("run", "run the experiment described by a JSON configuration");
    run->add_option("config", config_path, "configuration file")->required();

    auto* list = app.add_subcommand("list", "list registered experiments");

    std::string dir;
    auto* verify = app.add_subcommand("verify", "check hashes and acceptance predicates of a run directory");
    verify->add_option("dir", dir, "run output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return fail(contflow::InvalidConfig(std::string("command line: ") + e.what()));
    }

    try {
        if (*list) {
            std::cout << exp::list_text();
            return 0;
        }
        if (*run) {
            const exp::Config cfg = exp::load_config(config_path);
            const nlohmann::json manifest = exp::run(cfg);
            std::cout << nlohmann::json{{"experiment", cfg.experiment},
                                        {"out_dir", cfg.out_dir.string()},
                                        {"files", manifest.at("files").size()},
                                        {"wall_time_seconds", manifest.at("wall_time_seconds")}}
                             .dump()
                      << std::endl;
            return 0;
        }
        const exp::VerifyReport report = exp::verify(dir);
        std::cout << report.table();
        return report.passed() ? 0 : static_cast<int>(exp::ExitCode::verify_failed);
    } catch (const std::exception& e) {
        return fail(e);
    }
}
