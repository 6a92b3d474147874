"""
Error handling.
"""
import inspect
from enum import Enum
from typing import Any
from pydantic import BaseModel

class ErrorType(Enum):
    """
    Valid error types.
    """
    DIMENSION = "dimension"
    NOT_POSITIVE_DEFINITE = "not_positive_definite"
    SINGULAR = "singular"
    NON_FINITE = "non_finite"
    RANK_DEFICIENT = "rank_deficient"
    CONVERGENCE = "convergence"
    AUDIT_LIMIT = "audit_limit"
    STRUCTURE = "structure"
    INVALID_INPUT = "invalid_input"
    INVALID_CONFIG = "invalid_config"
    NOT_FOUND = "not_found"

class Error(BaseModel):
    """
    A consistent type for reporting errors.
    """
    type: ErrorType | None = None
    msg: Any | None = None
    input: Any | None = None
    loc: Any | None = None
    ctx: Any | None = None

    def __init__(self,
        type=None,
        msg=None,
        input=None,
        loc=None,
        ctx=None,
    ):
        BaseModel.__init__(self,
            type=type,
            msg=msg,
            input=input,
            loc=loc,
            ctx=ctx)
        if not self.loc:
            self.loc = [
                inspect.stack()[1].filename,
                inspect.stack()[1].function,
            ]

class KalmanError(Exception):
    """
    An operation failure carrying one or more error details.
    """
    def __init__(self, *detail: Error):
        self.detail = list(detail)
        # The partial run record, when a run aborts midway.
        self.record = None
        super().__init__("; ".join(str(d.msg) for d in self.detail))

    @property
    def type(self) -> ErrorType | None:
        """
        The type of the first error detail.
        """
        return self.detail[0].type if self.detail else None

    @property
    def ctx(self) -> dict:
        """
        The context of the first error detail.
        """
        if self.detail and isinstance(self.detail[0].ctx, dict):
            return self.detail[0].ctx
        return {}
