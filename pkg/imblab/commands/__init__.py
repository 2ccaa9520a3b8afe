"""Subcommands of the imblab command line.

Every module exposes ``get_subcommand(subparsers)``, which adds its parser
and sets ``func`` to the function handling the parsed arguments.
"""
