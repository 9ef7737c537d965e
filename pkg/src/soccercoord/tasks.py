"""Task and role enums shared by the bus, the task manager and the trace."""
import enum


class Task(str, enum.Enum):
    Attack = "Attack"
    Defend = "Defend"
    KeepGoal = "KeepGoal"
    ChangeTask = "ChangeTask"
    WaitClearOut = "WaitClearOut"


class Role(str, enum.Enum):
    Goalkeeper = "Goalkeeper"
    FieldPlayer = "FieldPlayer"


class NegotiationKind(str, enum.Enum):
    Request = "Request"
    Accept = "Accept"
    Reject = "Reject"
    Confirm = "Confirm"
