"""FLOPs ledger at training scale, without training anything.

Three image encoders paired with one text encoder, MLP1 connectors between
384-wide spaces, 558,128 samples for ten epochs. Direct training uses
batches of 2^14 and the hypernetwork batches of 2^9 with one pair per step.

Grid search trains all three pairs, so it always costs exactly three times
the Best Guess (training only the eventual winner). The hypernetwork's
savings against Best Guess depend on what generating parameters costs per
sample; the script solves for the generator cost at which the ratio is 1.48
and shows the other ratios that follow.
"""
from hyma import ledger

setup = ledger.ScaleSetup()
print(f"connector + similarity FLOPs per sample, direct:  {ledger.per_sample_direct(setup):,.0f}")
print(f"connector + similarity FLOPs per sample, hyma:    {ledger.per_sample_hyma(setup, 0):,.0f}")

free = ledger.scale_bills(setup, 0.0)
print(f"\nfree generator:      grid/hyma {free['grid_over_hyma']:.2f}x  "
      f"bestguess/hyma {free['best_guess_over_hyma']:.2f}x")

gen = ledger.generator_cost_for_ratio(setup, 1.48)
bills = ledger.scale_bills(setup, gen)
print(f"generator {gen / 1e6:.1f} MFLOPs/sample: grid/hyma {bills['grid_over_hyma']:.2f}x  "
      f"bestguess/hyma {bills['best_guess_over_hyma']:.2f}x")
print(f"grid / best guess = {bills['grid'] / bills['best_guess']:.0f} (the number of pairs)")

exp = ledger.hyma_exposure(27, 9, 10, setup.samples)
print(f"\n27 pairs, 9 per step: each pair sees {exp['per_pair_samples']:,.0f} of "
      f"{exp['total_samples']:,} samples ({exp['reduction']:.0f}x fewer)")
