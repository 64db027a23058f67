// Generates a small planted world, explains its no-finding instances with the
// exact projectors, and prints the top concepts of the first few.

#include <cstdio>

#include "ccf/ccf.hpp"

int main() {
  ccf::SynthConfig cfg;
  cfg.seed = 7;
  const ccf::SynthWorld world = ccf::gen_world(cfg);
  const ccf::ProjectorPair pair = world.exact_projectors();
  const std::size_t target = 1;

  const auto rows = world.instances_of(0);
  const auto res = ccf::top1_sanity(world.instances, rows, world.bank, pair, world.head, target,
                                    world.bank.names()[world.planted.at(target)], {});
  std::printf("planted concept at rank 1: %zu/%zu, flipped %zu\n", res.top1, res.n, res.flipped);

  for (std::size_t i = 0; i < 3 && i < rows.size(); ++i) {
    const auto r = ccf::optimize_perturbation(world.instances.row(rows[i]), world.bank, pair, world.head, target, {});
    std::printf("instance %zu: flipped=%d after %zu steps\n", rows[i], r.flipped, r.steps_used);
    for (const auto& c : ccf::rank_concepts(r, world.bank, 3))
      std::printf("  %-12s %+.4f\n", c.name.c_str(), c.importance);
  }
}
