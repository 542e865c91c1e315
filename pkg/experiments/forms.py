# experiments/forms.py
"""
Configuration forms for the experiment commands.

A command's configuration is resolved in three layers: the form's initial values
(settings-backed where a setting exists), then a flat key=value file read with
python-decouple, then command-line flags. The merged mapping is validated by the
command's form and cleaned_data becomes the config embedded in the report.
"""

import math

from decouple import RepositoryEnv
from django import forms
from django.conf import settings

from flow.memory_model import MemorySpec, Policy
from flow.precision_flow import NONLINEAR_MODES, LayerSpec
from numerics.exceptions import InvalidSpec
from numerics.fp8_codec import get_format
from numerics.quantizer import QuantMode, ScaleFormat
from optim.adamw import MomentPolicy, SlotPolicy

EMIT_CHOICES = (
    ('csv', 'CSV'),
    ('json', 'JSON'),
)

SCALE_FORMAT_CHOICES = [(fmt.value, fmt.name) for fmt in ScaleFormat]

ABLATION_POLICIES = 'E4M3,E4M3+Expand,E5M2,E5M2+Expand,DE8,DE8+Expand'


def read_config_file(path):
    """key=value pairs of an experiment config file; keys are lower-cased, '-' becomes '_'"""
    try:
        repository = RepositoryEnv(path)
    except OSError as exc:
        raise InvalidSpec(f"Cannot read config file {path}: {exc}") from exc
    return {key.strip().lower().replace('-', '_'): value for key, value in repository.data.items()}


class CommaSeparatedField(forms.CharField):
    """A comma separated list; cleans to a list of stripped, non-empty items"""

    def to_python(self, value):
        if isinstance(value, (list, tuple)):
            items = [str(item) for item in value]
        else:
            items = super().to_python(value).split(',')
        return [item.strip() for item in items if item.strip()]


def _initial(field):
    value = field.initial
    return value() if callable(value) else value


class ExperimentForm(forms.Form):
    """
    Options every command shares. Subclasses add their own fields; the field
    names double as config file keys and as command-line option dests.
    """
    seed = forms.IntegerField(
        min_value=0,
        max_value=2 ** 63 - 1,
        initial=0,
        help_text="Base seed; cell i of a sweep draws from seed + i"
    )
    emit = forms.ChoiceField(
        choices=EMIT_CHOICES,
        initial='csv',
        help_text="Report format"
    )
    out = forms.CharField(
        required=False,
        initial='',
        help_text="Write the report here instead of stdout"
    )

    @classmethod
    def resolve(cls, config_path=None, **overrides):
        """
        Merge defaults, the config file and non-None overrides, validate, and return
        the cleaned config. Raises InvalidSpec on unknown keys or invalid values.
        """
        data = {name: _initial(field) for name, field in cls.base_fields.items()
                if _initial(field) is not None}
        if config_path:
            from_file = read_config_file(config_path)
            unknown = sorted(set(from_file) - set(cls.base_fields))
            if unknown:
                raise InvalidSpec(f"Unknown config keys: {', '.join(unknown)}")
            data.update(from_file)
        data.update({name: value for name, value in overrides.items()
                     if value is not None and name in cls.base_fields})

        form = cls(data)
        if not form.is_valid():
            problems = '; '.join(
                f"{name}: {' '.join(errors)}" for name, errors in form.errors.items()
            )
            raise InvalidSpec(f"Invalid configuration ({problems})")
        return dict(form.cleaned_data)

    def _spec_error(self, exc):
        self.add_error(None, str(exc))


class CodecAuditForm(ExperimentForm):
    format = CommaSeparatedField(
        initial='E4M3,E5M2,DE8',
        help_text="Formats to enumerate"
    )

    def clean_format(self):
        tags = []
        for name in self.cleaned_data['format']:
            try:
                tag = get_format(name).tag.value
            except ValueError as exc:
                raise forms.ValidationError(str(exc))
            if tag not in tags:
                tags.append(tag)
        return tags


class OptimAblateForm(ExperimentForm):
    """
    The ablation matrix uses the same policy list for both moments, so the
    first/second grid is square.
    """
    policy = CommaSeparatedField(
        initial=ABLATION_POLICIES,
        help_text="Moment policies such as E4M3, E5M2+Expand, DE8+Expand or FP32"
    )
    group_size = forms.IntegerField(
        min_value=1,
        initial=lambda: settings.COATSIM_OPTIMIZER_GROUP_SIZE,
        help_text="Elements per quantization group of the optimizer states"
    )
    seeds = forms.IntegerField(
        min_value=1,
        initial=20,
        help_text="Number of simulated (m, v) pairs averaged per cell"
    )
    size = forms.IntegerField(
        min_value=1,
        initial=16384,
        help_text="Elements per simulated moment tensor"
    )
    steps = forms.IntegerField(
        min_value=1,
        initial=200,
        help_text="EMA updates used to build each moment pair"
    )
    eps = forms.FloatField(
        initial=1e-8,
        help_text="Denominator epsilon of the update direction"
    )
    k_max = forms.FloatField(
        min_value=1.0,
        initial=lambda: settings.COATSIM_K_MAX,
        help_text="Clamp for the expansion exponent of expanded policies"
    )

    def clean_policy(self):
        labels = []
        for text in self.cleaned_data['policy']:
            try:
                label = MomentPolicy.parse(text).label
            except InvalidSpec as exc:
                raise forms.ValidationError(str(exc))
            if label not in labels:
                labels.append(label)
        return labels

    def clean_eps(self):
        eps = self.cleaned_data['eps']
        if not eps > 0:
            raise forms.ValidationError("eps must be positive")
        return eps


class OptimTrainForm(ExperimentForm):
    TASK_CHOICES = (
        ('quadratic', 'Quadratic bowl'),
        ('regression', 'Layer regression'),
        ('both', 'Both'),
    )

    task = forms.ChoiceField(
        choices=TASK_CHOICES,
        initial='both'
    )
    policy = forms.CharField(
        initial='E4M3+Expand/E4M3+Expand',
        help_text="Quantized slot policy as first/second, e.g. DE8+Expand/E4M3+Expand"
    )
    group_size = forms.IntegerField(
        min_value=1,
        initial=lambda: settings.COATSIM_OPTIMIZER_GROUP_SIZE
    )
    steps = forms.IntegerField(min_value=1, initial=1000)
    dim = forms.IntegerField(min_value=1, initial=64)
    lr = forms.FloatField(min_value=0.0, initial=1e-3)
    weight_decay = forms.FloatField(min_value=0.0, initial=0.0)
    log_every = forms.IntegerField(
        min_value=1,
        initial=10,
        help_text="Report every n-th loss; the first and last are always kept"
    )
    regression_steps = forms.IntegerField(min_value=1, initial=40)
    hidden = forms.IntegerField(min_value=1, initial=32)
    seq_len = forms.IntegerField(min_value=1, initial=16)
    activation_group_size = forms.IntegerField(
        min_value=1,
        initial=lambda: settings.COATSIM_ACTIVATION_GROUP_SIZE
    )
    k_max = forms.FloatField(
        min_value=1.0,
        initial=lambda: settings.COATSIM_K_MAX,
        help_text="Clamp for the expansion exponent of expanded policies"
    )

    def clean_policy(self):
        try:
            return SlotPolicy.parse(self.cleaned_data['policy']).label
        except InvalidSpec as exc:
            raise forms.ValidationError(str(exc))

    def clean(self):
        cleaned_data = super().clean()
        if self.errors or cleaned_data.get('task') == 'quadratic':
            return cleaned_data
        try:
            LayerSpec(hidden_size=cleaned_data['hidden'], seq_len=cleaned_data['seq_len'],
                      group_size=cleaned_data['activation_group_size'], policy=Policy.COAT)
        except InvalidSpec as exc:
            self._spec_error(exc)
        return cleaned_data


class FlowSimForm(ExperimentForm):
    policy = CommaSeparatedField(
        initial='BF16,TE,COAT',
        help_text="Flow policies compared against the FP32 layer"
    )
    granularity = CommaSeparatedField(
        initial='per-group',
        help_text="Non-linear granularities tried under COAT: per-group, per-block"
    )
    format = forms.ChoiceField(
        choices=[('E4M3', 'E4M3'), ('E5M2', 'E5M2')],
        initial='E4M3'
    )
    group_size = CommaSeparatedField(
        initial=lambda: str(settings.COATSIM_ACTIVATION_GROUP_SIZE),
        help_text="Activation group sizes; square sizes also run the per-group vs per-block study"
    )
    seeds = forms.IntegerField(min_value=1, initial=20)
    hidden = forms.IntegerField(min_value=1, initial=64)
    seq_len = forms.IntegerField(min_value=1, initial=64)
    heads = forms.IntegerField(min_value=1, initial=4)
    scale_format = forms.ChoiceField(
        choices=SCALE_FORMAT_CHOICES,
        initial=ScaleFormat.BF16.value
    )
    outlier_fraction = forms.FloatField(min_value=0.0, max_value=0.99, initial=0.05)
    outlier_scale = forms.FloatField(
        initial=448.0 * 2 ** 8,
        help_text="Magnitude of outlier token rows in the granularity study"
    )

    def clean_policy(self):
        try:
            policies = [Policy(name.upper()).value for name in self.cleaned_data['policy']]
        except ValueError as exc:
            raise forms.ValidationError(str(exc))
        return list(dict.fromkeys(policies))

    def clean_granularity(self):
        modes = []
        for name in self.cleaned_data['granularity']:
            try:
                mode = QuantMode(name.lower())
            except ValueError as exc:
                raise forms.ValidationError(str(exc))
            if mode not in NONLINEAR_MODES:
                raise forms.ValidationError(f"{mode.value} is not a non-linear granularity")
            modes.append(mode.value)
        return list(dict.fromkeys(modes))

    def clean_group_size(self):
        sizes = []
        for item in self.cleaned_data['group_size']:
            try:
                size = int(item)
            except ValueError:
                raise forms.ValidationError(f"Group size {item!r} is not an integer")
            if size <= 0:
                raise forms.ValidationError("Group sizes must be positive")
            sizes.append(size)
        return sorted(set(sizes))

    def clean_outlier_scale(self):
        scale = self.cleaned_data['outlier_scale']
        if not scale > 0:
            raise forms.ValidationError("outlier_scale must be positive")
        return scale

    def clean(self):
        cleaned_data = super().clean()
        if self.errors:
            return cleaned_data
        for values in flow_layer_cells(cleaned_data):
            try:
                LayerSpec(**values)
            except InvalidSpec as exc:
                self._spec_error(exc)
                break
        return cleaned_data


def flow_layer_cells(config):
    """LayerSpec arguments of every (policy, granularity, group size) cell of flow_sim"""
    cells = []
    for policy in config['policy']:
        granularities = config['granularity'] if policy == Policy.COAT.value \
            else [QuantMode.PER_GROUP.value]
        # only FP8 policies depend on the group size
        sizes = config['group_size'] if policy in (Policy.TE.value, Policy.COAT.value) \
            else config['group_size'][:1]
        for granularity in granularities:
            for group_size in sizes:
                if granularity == QuantMode.PER_BLOCK.value \
                        and math.isqrt(group_size) ** 2 != group_size:
                    continue
                cells.append(dict(
                    hidden_size=config['hidden'], seq_len=config['seq_len'],
                    num_heads=config['heads'], group_size=group_size, policy=policy,
                    nonlinear_granularity=granularity, format=config['format'],
                    scale_format=config['scale_format'],
                ))
    return cells


class MemoryForm(ExperimentForm):
    policy = CommaSeparatedField(initial='BF16,TE,COAT')
    batch = forms.IntegerField(min_value=1, initial=1)
    seq_len = forms.IntegerField(min_value=1, initial=2048)
    hidden = forms.IntegerField(min_value=1, initial=4096)
    intermediate = forms.IntegerField(
        min_value=1,
        required=False,
        help_text="Defaults to 8/3 of hidden"
    )
    include_scales = forms.BooleanField(
        required=False,
        initial=False,
        help_text="Add scaling-factor bytes to the byte column"
    )
    group_size = forms.IntegerField(
        min_value=1,
        initial=lambda: settings.COATSIM_ACTIVATION_GROUP_SIZE
    )
    scale_format = forms.ChoiceField(
        choices=SCALE_FORMAT_CHOICES,
        initial=ScaleFormat.BF16.value
    )

    def clean_policy(self):
        policies = []
        for name in self.cleaned_data['policy']:
            try:
                policy = Policy(name.upper())
            except ValueError as exc:
                raise forms.ValidationError(str(exc))
            if not policy.modelled:
                raise forms.ValidationError("The memory table covers BF16, TE and COAT")
            policies.append(policy.value)
        return list(dict.fromkeys(policies))

    def clean(self):
        cleaned_data = super().clean()
        if self.errors:
            return cleaned_data
        try:
            memory_spec(cleaned_data, Policy.BF16)
        except InvalidSpec as exc:
            self._spec_error(exc)
        return cleaned_data


def memory_spec(config, policy):
    return MemorySpec(
        batch=config['batch'], seq_len=config['seq_len'], hidden=config['hidden'],
        policy=policy, intermediate=config.get('intermediate'),
        include_scales=config['include_scales'], group_size=config['group_size'],
        scale_format=config['scale_format'],
    )
