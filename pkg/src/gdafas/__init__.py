"""Stylize-then-classify domain adaptation for face anti-spoofing.

The package trains a small source network (feature extractor, classifier
head, depth estimator) on labeled source data, freezes it, and then adapts a
generator that maps unlabeled target images toward the source style. The
frozen network classifies the stylized images. Adaptation is driven by
batch-statistic alignment against the frozen running statistics, content
preservation in feature and phase space, spectrum mixup for neighborhood
smoothness, and prediction-entropy minimization.
"""

__version__ = "0.1.0"
