// Query-only oracle for blackbox surrogate building. Serves an adapted
// checkpoint over stdin/stdout:
//   "q <pixels...>"  ->  "p <probs...>"   (one line per query, %.9g floats)
//   "quit"           ->   exit 0
// Malformed input gets "err <reason>" and the loop continues.

#include <iostream>

#include "CLI11.hpp"

#include "diva/checkpoint.hpp"
#include "diva/distill.hpp"

int main(int argc, char** argv) {
  CLI::App app{"probability oracle over stdio"};
  std::string ckpt;
  app.add_option("--checkpoint", ckpt, "adapted model checkpoint")->required();
  CLI11_PARSE(app, argc, argv);
  try {
    diva::AdaptedModel victim = diva::import_adapted(ckpt);
    diva::serve_teacher(victim, std::cin, std::cout);
  } catch (const diva::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const diva::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
