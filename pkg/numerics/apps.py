from django.apps import AppConfig


class NumericsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'numerics'
    verbose_name = 'FP8 numerics'
