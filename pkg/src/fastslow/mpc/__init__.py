from .contour import (ContourErrors, ReferenceProgress, contour_errors, tighten_input_constraint,
                      tighten_state_constraint)
from .qp import QPError, QPResult, solve_qp
from .solver import ContouringMPC, HorizonSolution, MPCError, SolveDiagnostics

__all__ = [
    "ContourErrors", "ReferenceProgress", "contour_errors", "tighten_input_constraint",
    "tighten_state_constraint", "QPError", "QPResult", "solve_qp", "ContouringMPC",
    "HorizonSolution", "MPCError", "SolveDiagnostics",
]
