"""Plant twelve stubborn tokens in a toy teacher/student pair, train, and see
whether the detector recovers them from rollout losses alone.

    python demos/01_find_planted_rocks.py
"""

from rocktokens import simlab
from rocktokens.cutoff import stability_sweep
from rocktokens.detect import DetectionConfig, Selection, select_rock_tokens

world = simlab.build_world(simlab.SimConfig(seed=5))
names = [world.vocabulary[v] for v in world.planted]
print(f"planted: {names}")

log = simlab.train(world)
print(f"training: mean KL {log.mean_kl[0]:.4f} -> {log.mean_kl[-1]:.4f} over {len(log.steps)} steps")

corpus = simlab.rollout(world, 500, 4, seed=5)
report = select_rock_tokens(corpus, DetectionConfig(selection=Selection.top_k(20)))
found = set(report.rock_set) & set(world.planted)
print(f"top-20 by context-filtered score holds {len(found)}/{len(world.planted)} planted tokens")
for agg in report.tokens[:15]:
    mark = "*" if agg.token_id in world.planted else " "
    print(f"  {mark} {world.vocabulary[agg.token_id]!r:8} freq {agg.freq:5d}  R_ctx {agg.rock_score_ctx:8.2f}  CCR {agg.ccr:.2f}")
print(f"median share of rock tokens per rollout: {report.median_density:.3f}")

# how stable is the ranking when fewer rollouts are available?
sweep = stability_sweep(corpus, sizes=[100, 400, 1000], ks=[5, 10, 20, 40], repeats=5, seed=1)
print(sweep.jaccard_csv())
