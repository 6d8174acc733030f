"""Movie-poster winner prediction: image descriptors, SMO-trained SVMs and leave-one-year-out evaluation."""

__version__ = "0.1.0"
