"""Ask-an-advisor baseline with a scripted advisor.

Shows the prompt rendered from zoo metadata, how free-text replies are
parsed into a pair, and the retry on a malformed first reply. Swap in
``HttpAdvisor(endpoint)`` (credential read from HYMA_ADVISOR_KEY) to query
a real service.
"""
from hyma import embeddings as em
from hyma import objectives as ob
from hyma import search as se
from hyma import trainer as tr
from hyma.errors import AdvisorParseError

zoo, ds = em.planted_zoo([1.0, 0.6, 0.2], [0.8, 0.4], dims_a=[16, 24, 20], dims_b=[12, 16],
                         latent_dim=8, sample_count=512, seed=0)
print(se.render_prompt(zoo, "image-text retrieval", "planted synthetic", "linear"))

for reply in ["I'd pick (img0, txt0).", "Best: (`IMG2`, 'txt1')", "no idea"]:
    try:
        k = se.parse_advisor_reply(reply, zoo)
        print(f"{reply!r:32} -> pair {k} ({zoo.pair_name(k)})")
    except AdvisorParseError as exc:
        print(f"{reply!r:32} -> {exc}")

ctx = se.SearchContext(zoo, ds, tr.layouts_for(zoo, "linear"),
                       tr.TrainConfig(batch_size=64, epochs=3), ob.retrieval_task(ds.val, k=5))
out = se.run_ask_advisor(ctx, se.ScriptedAdvisor(["hmm", "go with (img0, txt0)"]),
                         task_name="retrieval", dataset_name="planted synthetic")
print(f"\nadvisor picked {zoo.pair_name(out.winner)}: R@5 {out.winner_metric:.3f}, "
      f"{out.flops_total:,} FLOPs, flags {out.flags}")
