"""Bias as the spread of per-group accuracy.

Three classifiers with similar overall accuracy can treat groups very
differently.  The unbiased sample variance of the per-race accuracies puts a
number on that difference.
"""

from fairfader.fairness import EvalReport, accuracy_variance

per_race = {
    "SimpleCNN": [92.41, 91.56, 84.07, 90.93, 88.61],
    "SimpleCNN-WL": [89.84, 90.25, 83.64, 92.02, 88.27],
    "FaderCNN": [85.65, 86.08, 80.90, 87.66, 83.86],
}

for name, accs in per_race.items():
    r = EvalReport.from_accuracies(accs, [474] * 5, name)
    print(f"{name:13s} overall {r.overall_accuracy:6.2f}   variance {r.variance:6.2f}")

ratio = accuracy_variance(per_race["FaderCNN"]) / accuracy_variance(per_race["SimpleCNN"])
print(f"\nFaderCNN keeps {ratio:.0%} of the SimpleCNN variance: "
      f"a {1 - ratio:.0%} reduction bought with about 5 points of overall accuracy.")
