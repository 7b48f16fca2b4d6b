"""Global-local text-video alignment: shared-center VLAD aggregation over
expert features, mixture-of-experts global similarity, margin-ranking
training and retrieval evaluation, with a small reverse-mode autodiff core."""

__version__ = "0.1.0"
