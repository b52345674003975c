"""The linear-view model of misclassification under Gaussian input noise.

A correct prediction is lost when the noise component along the loss
gradient exceeds the distance ``a`` to the decision boundary. With ``a``
fitted as a Gaussian, the predicted error rate is closed form.

Run: python3 demos/noise_risk_model.py
"""

from gradreg.robust import (MinPerturbStats, NoiseModel, equal_distortion_bound,
                            linear_density_increase, monte_carlo_missrate, predict_missrate)

# Reference softmax statistics: clean error 6.02%, a ~ N(0.2744, 0.1511^2).
stats = MinPerturbStats.from_moments(0.2744, 0.1511)
for sigma in (0.0, 0.1, 0.3):
    noise = NoiseModel(sigma)
    print(f"noise sigma={sigma:.1f}: predicted {100 * predict_missrate(0.0602, stats, noise):6.2f}%"
          f"   simulated {100 * monte_carlo_missrate(0.0602, stats, noise):6.2f}%")
print()

# With the noise variance matched to the distortion, the union bound
# collapses quickly with the input dimension.
for d in (4, 16, 64, 784):
    print(f"d={d:4d}: P(adversarial direction hit by noise) <= {equal_distortion_bound(1, d):.3e}")
print()

# Near zero the density of a is roughly linear; tiny noise then adds
# (1 - P(miss)) * c * sigma^2 / 4 errors.
print("linear-density increase, c=100, sigma=0.01:",
      f"{100 * linear_density_increase(100.0, 0.0602, 0.01):.4f}%")
