#include <exception>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fen/commands.hpp"
#include "fen/config.hpp"
#include "fen/errors.hpp"

namespace {

struct SubArgs {
  std::string config_path;
  std::vector<std::string> overrides;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fen: scene-text detector training, inference and evaluation"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::function<int(const fen::RunConfig&)>>> commands{
      {"train", fen::cmd_train},       {"detect", fen::cmd_detect}, {"eval", fen::cmd_eval},
      {"gradcheck", fen::cmd_gradcheck}, {"pmstats", fen::cmd_pmstats},
  };

  std::vector<SubArgs> args(commands.size());
  for (std::size_t i = 0; i < commands.size(); ++i) {
    CLI::App* sub = app.add_subcommand(commands[i].first, commands[i].first + " command");
    sub->add_option("--config", args[i].config_path, "key = value config file")->required();
    sub->add_option("--set", args[i].overrides, "override a config key (key=value)");
  }

  try {
    app.parse(argc, argv);
    for (std::size_t i = 0; i < commands.size(); ++i) {
      if (!app.get_subcommands().empty() &&
          app.get_subcommands().front()->get_name() == commands[i].first) {
        const fen::RunConfig cfg = fen::make_run_config(args[i].config_path, args[i].overrides);
        return commands[i].second(cfg);
      }
    }
    std::cerr << "fen: no command selected\n";
    return 1;
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  } catch (const fen::UsageError& e) {
    std::cerr << "fen: " << e.what() << "\n";
    return 1;
  } catch (const fen::DataError& e) {
    std::cerr << "fen: " << e.what() << "\n";
    return 2;
  } catch (const fen::NumericError& e) {
    std::cerr << "fen: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "fen: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "fen: " << e.what() << "\n";
    return 1;
  }
}
