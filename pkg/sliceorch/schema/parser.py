import os
import re
import json
import logging
from typing import Optional

import jsonschema

from sliceorch import DOMAINS
from sliceorch.env import DomainSpec, ScenarioConfig, SliceSpec, TrafficModel
from sliceorch.errors import ValidationError

logger = logging.getLogger(__name__)


def locate(text: str, loc: tuple) -> Optional[int]:
    """
    Best-effort line number of a JSON location (tuple of keys and indices)
    inside `text`: each string key is searched after the previous one.
    """
    pos, found = 0, None
    for part in loc:
        if not isinstance(part, str):
            continue
        match = re.compile(r'"%s"\s*:' % re.escape(part)).search(text, pos)
        if match is None:
            break
        pos = found = match.start()
    if found is None:
        return None
    return text.count("\n", 0, found) + 1


def parse_json(text: str, source: str = "<string>") -> dict:
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"line {e.lineno}: {source} is not valid JSON: {e.msg} (column {e.colno})")


class ScenarioParser:
    def __init__(self):
        """
        Initializes the parser using the "scenario.schema.json" file
        located in the same directory.
        """
        schema_path = os.path.join(os.path.dirname(__file__), "scenario.schema.json")
        with open(schema_path, "r") as schema_file:
            self.schema = json.load(schema_file)
        self.validator = jsonschema.Draft7Validator(self.schema)

    def validate(self, document: dict, text: str = ""):
        """
        Checks a scenario document against the schema.
        Raises a ValidationError for the first error found, with line context
        when the source text is available.
        """
        errors = sorted(self.validator.iter_errors(document), key=lambda e: list(map(str, e.absolute_path)))
        if errors:
            raise ValidationError(errors[0], locate=lambda loc: locate(text, loc) if text else None)

    def parse(self, text: str, source: str = "<string>") -> ScenarioConfig:
        document = parse_json(text, source)
        self.validate(document, text)
        return self.build(document)

    def load(self, path: str) -> ScenarioConfig:
        with open(path, "r") as f:
            text = f.read()
        scenario = self.parse(text, source=path)
        logger.info(
            f"loaded scenario {scenario.name or path}: "
            f"{scenario.n_slices} slices over {list(scenario.domain_ids)}"
        )
        return scenario

    def build(self, document: dict) -> ScenarioConfig:
        """
        Converts a schema-valid document into a ScenarioConfig.
        Domains are reordered along the chain; semantic checks happen in ScenarioConfig.
        """
        domains = sorted(
            (DomainSpec(d["id"], float(d["capacity"]), float(d["service_rate"])) for d in document["domains"]),
            key=lambda d: DOMAINS.index(d.id),
        )
        slices = [
            SliceSpec(
                id=s["id"],
                name=s.get("name", ""),
                latency_bound=float(s["latency_bound"]),
                min_throughput=float(s.get("min_throughput", 0.0)),
                traffic=TrafficModel(**{k: float(v) for k, v in s["traffic"].items()}),
            )
            for s in sorted(document["slices"], key=lambda s: s["id"])
        ]
        options = {
            key: document[key]
            for key in ("l_max", "headroom", "slot_duration", "episode_length", "throughput_epsilon", "name")
            if key in document
        }
        if "weights" in document:
            options["weights"] = tuple(document["weights"])
        if "decomposition_weights" in document:
            options["decomposition_weights"] = tuple(document["decomposition_weights"])
        if "agents" in document:
            options["agents"] = tuple(document["agents"])
        return ScenarioConfig(domains=tuple(domains), slices=tuple(slices), **options)


def load_scenario(path: str) -> ScenarioConfig:
    return ScenarioParser().load(path)
