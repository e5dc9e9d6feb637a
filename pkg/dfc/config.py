"""Run configuration files of ``key=value`` lines with command-line overrides"""
from configparser import ConfigParser, Error as ConfigParserError

from .budget import BudgetConfig
from .compressor import TrainLoopConfig

__all__ = ["RunConfig", "KEYS"]


def _bool(value):
    if isinstance(value, bool):
        return value
    state = ConfigParser.BOOLEAN_STATES.get(str(value).strip().lower())
    if state is None:
        raise ValueError(f"'{value}' is not a boolean")
    return state


# key: (type, default)
KEYS = {
    "budget": (float, 0.5),
    "lambda": (float, 1.0),
    "tau_c": (float, 2.0),
    "mu0": (float, 5.0),
    "alpha": (float, 50.0),
    "beta": (float, 4.0),
    "epsilon": (float, 0.02),
    "hard_epsilon": (float, 0.05),
    "epochs": (int, 1),
    "batch_size": (int, 128),
    "optimizer": (str, "adam"),
    "lr": (float, 0.1),
    "seed": (int, 0),
    "scheme": (int, 1),
    "schedule_on": (_bool, True),
    "mode": (str, "hybrid"),
    "max_restarts": (int, 15),
    "settle": (_bool, True),
    "threshold_lr": (float, 0.05),
    "momentum": (float, 0.9),
    "svd_gradient": (str, "full"),
    "scheduled_counts": (_bool, False),
    "straight_through": (_bool, True),
    "shrink": (_bool, False),
    "checked": (_bool, False),
    "flip": (_bool, False),
    "crop": (int, 0),
    "finetune_epochs": (int, 100),
    "finetune_lr": (float, 0.001),
    "baseline_lr": (float, 0.01),
}


class RunConfig():
    def __init__(self, values=None):
        """Effective settings of a run

        Parameters
        ----------
        values : `dict`, optional
            Settings that differ from the defaults, by default None
        """
        self.values = {key: default for key, (_, default) in KEYS.items()}
        self.sources = {key: "default" for key in KEYS}
        if values is not None:
            self.update(values, source="argument")

    def __repr__(self):
        changed = {k: v for k, v in self.values.items() if self.sources[k] != "default"}
        return f"<{self.__class__.__name__}: {changed}>"

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_string(cls, text):
        """Parse ``key=value`` lines (``#`` and ``;`` start comments)

        Raises
        ------
        ValueError
            On unknown keys, duplicate keys, unparseable lines or values of the wrong type
        """
        parser = ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",),
                              interpolation=None)
        # keys are case sensitive
        parser.optionxform = str
        try:
            parser.read_string("[run]\n" + text)
        except ConfigParserError as e:
            raise ValueError(f"Invalid run configuration: {e}") from e
        config = cls()
        config.update(dict(parser["run"]), source="file")
        return config

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls.from_string(f.read())

    def update(self, overrides, source="override"):
        """Set keys from a dict, coercing their types; None values are ignored"""
        for key, value in overrides.items():
            if key not in KEYS:
                raise ValueError(f"Unknown configuration key '{key}', expected one of {sorted(KEYS)}")
            if value is None:
                continue
            kind = KEYS[key][0]
            try:
                self.values[key] = kind(value.strip() if isinstance(value, str) else value)
            except (TypeError, ValueError) as e:
                raise ValueError(f"Configuration key '{key}': cannot read '{value}' ({e})") from e
            self.sources[key] = source
        return self

    def copy(self):
        new = RunConfig()
        new.values, new.sources = dict(self.values), dict(self.sources)
        return new

    def render(self):
        """``key=value`` text of every setting, in key order"""
        return "\n".join(f"{key}={str(v).lower() if isinstance(v, bool) else v}"
                         for key, v in self.values.items()) + "\n"

    def train_config(self):
        """The compression loop settings as a :class:`~dfc.compressor.TrainLoopConfig`"""
        v = self.values
        return TrainLoopConfig(epochs=v["epochs"], batch_size=v["batch_size"], tolerance=v["epsilon"],
                               hard_tolerance=v["hard_epsilon"], optimizer=v["optimizer"], lr=v["lr"],
                               threshold_lr=v["threshold_lr"], momentum=v["momentum"], seed=v["seed"],
                               max_restarts=v["max_restarts"], settle=v["settle"], mu0=v["mu0"],
                               alpha=v["alpha"], beta=v["beta"],
                               schedule_on=v["schedule_on"], scheme=v["scheme"], mode=v["mode"],
                               svd_gradient=v["svd_gradient"], checked=v["checked"], flip=v["flip"],
                               crop=v["crop"])

    def budget_config(self):
        """The budget settings as a :class:`~dfc.budget.BudgetConfig`"""
        v = self.values
        return BudgetConfig(budget=v["budget"], lam=v["lambda"], tau_c=v["tau_c"],
                            scheduled_counts=v["scheduled_counts"], straight_through=v["straight_through"])
