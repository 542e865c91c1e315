from django.apps import AppConfig


class OptimConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'optim'
    verbose_name = 'Quantized optimizer'
