"""
rekall: data-free class-incremental metric learning.

A student embedding network learns tasks one after another. A frozen copy of the
previous student (the teacher) and an adversarially trained generator supply
synthetic images on which feature attention matching, covariance decorrelation
and an embedding distance keep the student close to what it knew before.
"""

__version__ = "0.1.0"
