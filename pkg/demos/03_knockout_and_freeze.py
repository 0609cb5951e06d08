"""Are the persistent tokens needed for the answer?  Ban each one at decode
time and measure the accuracy change; then train with their loss terms
frozen and compare against a frequency-matched random freeze.

    python demos/03_knockout_and_freeze.py
"""

from rocktokens import simlab
from rocktokens.knockout import census, evaluate_candidates
from rocktokens.reweight import FreqMatchedSource, RockFreezeSource

cfg = simlab.SimConfig(seed=5)
world = simlab.build_world(cfg)
simlab.train(world)
env = simlab.SimEnvironment.for_checkpoint(world, "post")

candidates = list(world.planted) + [world.pillar]
records = evaluate_candidates(env, candidates, prompts=200, rollouts_per_prompt=5, seed=9)
for r in sorted(records, key=lambda r: r.delta_token):
    print(f"  ban {world.vocabulary[r.candidate]!r:8} delta {r.delta_token:+.3f}  p={r.bootstrap_token.p_value:.4f}  {r.category}")
cen = census(records)
print(f"census: {cen.counts}")

prompts = list(range(100))
for label, source in [
    ("no freeze", None),
    ("rock freeze", RockFreezeSource(world.planted)),
    ("random freeze", FreqMatchedSource(world.planted, seed=3)),
]:
    fresh = simlab.build_world(cfg)
    log = simlab.train(fresh, steps=200, mask_source=source)
    acc = simlab.evaluate_accuracy(fresh, fresh.student_policy("post"), prompts, 5, seed=1).mean()
    active = sum(log.active_terms) / sum(log.total_terms)
    print(f"{label:>13}: accuracy {acc:.3f}, gradient terms kept {active:.1%}")
