// Reference ranking behind the rank-kernel command line:
//   rank-reference --query Q.emb --gallery G.emb --topk 1,5,10,20 --out report.json
#include <fstream>
#include <iostream>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "reid/kernel.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Reference CMC/mAP over REIDEMB1 files"};
  std::string query, gallery, out;
  std::vector<int> topk{1, 5, 10, 20};
  unsigned workers = 1;
  app.add_option("--query", query)->required();
  app.add_option("--gallery", gallery)->required();
  app.add_option("--topk", topk)->delimiter(',');
  app.add_option("--out", out)->required();
  app.add_option("--workers", workers);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  try {
    const auto q = reid::read_embeddings(query);
    const auto g = reid::read_embeddings(gallery);
    const auto report = reid::cmc_map(q, g, std::set<int>(topk.begin(), topk.end()), workers);
    std::ofstream(out) << reid::kernel_report_json(report).dump() << '\n';
  } catch (const reid::Error& e) {
    std::cerr << "error [" << reid::to_string(e.kind()) << "]: " << e.what() << '\n';
    return reid::kernel_exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
