class SingularTransferError(ArithmeticError):
    """The system matrix D^-1 Gamma^-1 - A is singular at a sampled frequency"""

    def __init__(self, omega, message=None):
        self.omega = float(omega)
        super().__init__(message or f'Singular system matrix at omega = {self.omega:.6f} rad/sample')
