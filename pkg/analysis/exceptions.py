class UndefinedDecayError(ArithmeticError):
    """Energy decay of an all-zero signal"""


class DefectiveEigensystemWarning(RuntimeWarning):
    """Some poles have no reliable residue because left and right eigenvectors are nearly orthogonal"""
