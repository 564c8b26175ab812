from .parser import ScenarioParser, load_scenario  # noqa
