"""
Rollout evaluation, composition tests, skill/word heatmaps, fixed-skill behaviour
profiles, the k-means baseline and ablation sweeps.
"""
