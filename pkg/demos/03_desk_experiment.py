"""One seed of the desk-scale bias experiment, start to finish.

The synthetic data hides gender in bar orientation and race in background
luminance; for minority races the bar is often faint.  A plain autoencoder
keeps race in its latent code, a fader network is trained to drop it.  The
gender classifiers on top are then compared by their per-race accuracy
spread.  Takes a few minutes on one core.
"""

import sys

from fairfader import experiment as X

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
res = X.run_desk(X.DeskConfig(), seed)

print(f"race probe on latents: vanilla AE {res.probe_vanilla_acc:.1f}%  fader {res.probe_fader_acc:.1f}%"
      "  (chance 20%)")
print(f"fader discriminator at the selected step {res.selected_step}: {res.fader_dis_acc:.1f}%")
print("discriminator validation accuracy per checkpoint:")
print("  " + " ".join(f"{a:.0f}" for _, a, _ in res.dis_curve))
print()
for name, r in res.reports.items():
    accs = " ".join(f"{a:6.1f}" for a in r.per_class_accuracy)
    print(f"{name:13s} per race [{accs}]  variance {r.variance:7.2f}")
