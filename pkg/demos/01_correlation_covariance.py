"""
Covariance of an empirical correlation matrix
=============================================

The sampling covariance of the vectorized correlation matrix has a closed
form. Here we compare it with a Monte-Carlo estimate, then look at how
temporally correlated rows inflate the spread.
"""
import numpy as np

from corrdiff.corrmat import corr_covariance, effective_df, group_average, vectorize
from corrdiff.simulate import SimParams, gen_parameters, gen_samples, make_rng

theta, _ = gen_parameters(SimParams(p=4), make_rng(0, 0))
print("population correlation matrix:\n", np.round(theta, 3))

# closed form, one row and column per variable pair
C = corr_covariance(theta)
print("closed-form C (6 x 6):\n", np.round(C, 3))

# i.i.d. rows: T times the empirical covariance approaches C
T = 2000
R = gen_samples(theta, 4000, T, rng=make_rng(0, 1))
E = T * np.cov(vectorize(R).T)
print("largest |T Cov - C|:", np.abs(E - C).max().round(4))

# ARMA(1,1) rows carry less information than T independent rows
R_arma = gen_samples(theta, 400, 100, ar=(0.5,), ma=(0.5,), rng=make_rng(0, 2))
cov = np.cov(vectorize(R_arma).T)
t_eff = effective_df(100, group_average(R_arma))
print(f"T_eff = {t_eff:.1f} of T = 100")
print("distance scaled by T:    ", np.linalg.norm(100 * cov - C).round(3))
print("distance scaled by T_eff:", np.linalg.norm(t_eff * cov - C).round(3))
