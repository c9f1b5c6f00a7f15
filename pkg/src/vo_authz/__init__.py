"""Role- and group-aware authorization for virtual organizations.

A policy database in which roles are ordinary resources, an issuance
service that embeds <action, target> rights in signed assertions, a
tagged-credential client, and a file service that enforces role-to-
account mapping with an issuer trust check and DN-level auditing.
"""

__version__ = "0.1.0"
