class ResGradError(Exception):
    """Base class for every error raised by resgrad"""
    pass


# Graph

class GraphError(ResGradError):
    pass


class MissingField(GraphError):
    def __init__(self, name, component_id=None):
        self.name = name
        self.component_id = component_id
        where = f" (component {component_id})" if component_id else ""
        super().__init__(f"Missing field '{name}'{where}")


class CycleOrForwardReference(GraphError):
    def __init__(self, component_id, field_name, producer_id):
        self.component_id = component_id
        self.field_name = field_name
        self.producer_id = producer_id
        super().__init__(
            f"Component '{component_id}' consumes '{field_name}' which is produced "
            f"by '{producer_id}' at or after it in declaration order"
        )


class DepthTooSmall(GraphError):
    pass


class UnknownComponent(GraphError):
    def __init__(self, component_id):
        self.component_id = component_id
        super().__init__(f"Unknown component '{component_id}'")


class NodeNotFound(GraphError):
    def __init__(self, node_id, example_index=None):
        self.node_id = node_id
        self.example_index = example_index
        where = f" in trajectory {example_index}" if example_index is not None else ""
        super().__init__(f"Node '{node_id}' not found{where}")


# Backends

class BackendError(ResGradError):
    def __init__(self, detail, retryable=False):
        self.detail = detail
        self.retryable = retryable
        super().__init__(detail)


# Forward

class ForwardError(ResGradError):
    """A component failed; the trajectory recorded up to the failure rides along"""

    def __init__(self, component_id, cause, trajectory=None):
        self.component_id = component_id
        self.cause = cause
        self.trajectory = trajectory
        super().__init__(f"Component '{component_id}' failed: {cause}")


class OutputArityMismatch(ForwardError):
    def __init__(self, component_id, expected, found):
        self.expected = tuple(expected)
        self.found = tuple(found)
        super().__init__(component_id, f"declared outputs {list(self.expected)} but produced {list(self.found)}")


class ToolNotRegistered(ForwardError):
    def __init__(self, component_id):
        super().__init__(component_id, "no tool callback registered")


# Backward

class BackwardError(ResGradError):
    def __init__(self, component_id, cause, report=None):
        self.component_id = component_id
        self.cause = cause
        self.report = report
        super().__init__(f"Projector failed at '{component_id}': {cause}")


# Scheduling / optimization

class SchedulerError(ResGradError):
    pass


class NoOptimizableComponents(SchedulerError):
    def __init__(self):
        super().__init__("No optimizable components to select from")


class OptimizerError(ResGradError):
    pass


class EmptyBuffer(OptimizerError):
    def __init__(self, component_id):
        self.component_id = component_id
        super().__init__(f"Feedback buffer for '{component_id}' is empty")


class TagsNotFound(OptimizerError):
    def __init__(self, start_tag, end_tag):
        self.start_tag = start_tag
        self.end_tag = end_tag
        super().__init__(f"Completion has no text between {start_tag} and {end_tag}")


# Simulation / analysis

class SimulationError(ResGradError):
    pass


class InterventionError(SimulationError):
    pass


class MisalignedRecords(SimulationError):
    pass


# Configuration / data

class ConfigError(ResGradError):
    pass


class ConfigParseError(ConfigError):
    def __init__(self, path, message, line=None, column=None):
        self.path = str(path)
        self.line = line
        self.column = column
        location = f":{line}:{column}" if line is not None else ""
        super().__init__(f"{self.path}{location}: {message}")


class ConfigValidationError(ConfigError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DatasetError(ResGradError):
    pass
