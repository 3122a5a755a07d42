from .kmeans import ClusterLabels, constrained_kmeans
from .lsa import BACKEND, Assignment, linear_sum_assignment
from .omp import omp_denoise, omp_support

__all__ = ["Assignment", "BACKEND", "ClusterLabels", "constrained_kmeans", "linear_sum_assignment",
           "omp_denoise", "omp_support"]
