"""flowline: self-hosted research process automation.

Declarative flows run durably against asynchronous action providers;
queues, triggers, and timers start them in response to events and
schedules; a scoped-token authorization model gates every operation.
"""

__version__ = "0.1.0"
