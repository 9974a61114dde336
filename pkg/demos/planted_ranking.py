"""Planted-ranking walkthrough.

Builds a 3 x 3 synthetic zoo whose encoder noise levels fix a known pair
ordering, trains every pair independently (grid search), trains one
hypernetwork for all nine pairs, and compares the three rankings.

    python demos/planted_ranking.py [seed]

Takes about a minute on one CPU core.
"""
import sys
import time

from hyma import embeddings as em
from hyma import metrics as me
from hyma import objectives as ob
from hyma import search as se
from hyma import trainer as tr

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

zoo, ds = em.planted_zoo([1.0, 0.6, 0.2], [0.8, 0.5, 0.3], dims_a=[32, 48, 40], dims_b=[24, 32, 28],
                         sample_count=4096, seed=seed)
planted = dict(enumerate(em.planted_scores(zoo)))
print("planted order:", " > ".join(zoo.pair_name(k) for k in me.order_by_metric(planted)))

layouts = tr.layouts_for(zoo, "mlp1", hidden=1024)
task = ob.retrieval_task(ds.val, k=1)
config = tr.TrainConfig(batch_size=128, epochs=10, seed=seed)

t0 = time.perf_counter()
grid = se.run_grid_search(se.SearchContext(zoo, ds, layouts, config, task))
t1 = time.perf_counter()
hyma = se.run_hyma_search(se.SearchContext(zoo, ds, layouts, config.replace(model_batch=1), task),
                          cond_dim=32, generator_hidden=(64,))
t2 = time.perf_counter()

g, h = grid.metrics(), hyma.metrics()
print(f"\n{'pair':>12} {'planted':>8} {'grid R@1':>9} {'hyma R@1':>9}")
for k in me.order_by_metric(planted):
    print(f"{zoo.pair_name(k):>12} {planted[k]:8.3f} {g[k]:9.3f} {h[k]:9.3f}")

print(f"\ngrid search: {t1 - t0:.0f}s, {grid.flops_total:.3e} FLOPs")
print(f"hypernetwork: {t2 - t1:.0f}s, {hyma.flops_total:.3e} FLOPs "
      f"({grid.flops_total / hyma.flops_total:.2f}x cheaper)")
print(f"Spearman rho grid vs planted: {me.spearman_rho(g, planted):.3f}")
print(f"Spearman rho hyma vs grid:    {me.spearman_rho(h, g):.3f}")
print(f"NDCG@3 hyma vs grid:          {me.ndcg_from_metrics(h, g, 3):.3f}")
