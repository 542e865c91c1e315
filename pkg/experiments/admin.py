# experiments/admin.py

from django.contrib import admin
from .models import ExperimentRun

@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    """
    Read-only browsing of recorded runs
    """
    list_display = ['id', 'command', 'seed', 'emit', 'passed', 'created_at']
    list_filter = ['command', 'passed', 'emit', 'created_at']
    search_fields = ['command', 'out_path']
    ordering = ['-created_at']
    readonly_fields = ['command', 'config', 'seed', 'emit', 'report', 'passed',
                       'verdicts', 'out_path', 'created_at']

    fieldsets = (
        ('Run', {
            'fields': ('command', 'seed', 'passed', 'verdicts', 'created_at')
        }),
        ('Configuration', {
            'fields': ('config',),
        }),
        ('Report', {
            'fields': ('emit', 'out_path', 'report'),
            'classes': ['collapse']
        }),
    )

    def has_add_permission(self, request):
        return False
