from typing import Any, Type, Dict

# map of env_id to environment class
registered_environments = {}  # type: Dict[str, Type[Any]]


class RegisteredEnvironmentMeta(type):
    """
    Registers environment classes in a dictionary, to make them accessible
    dynamically through their ``env_id``.

    Classes are registered by default, unless ``register_environment = False``
    is specified at the class level.
    """
    def __new__(mcs, name, bases, attrs):
        klass = super().__new__(mcs, name, bases, attrs)

        # we register classes by default, unless `register_environment = False` is specified at the class level
        if attrs.get('register_environment', True):
            registered_environments[klass.env_id] = klass
        return klass


def get_environment_class(env_id: str) -> Type[Any]:
    """ Returns the environment class registered under ``env_id``. """
    from steprefine.exceptions import ConfigurationError

    # importing the concrete environments registers them
    import steprefine.gridhouse  # noqa: F401
    import steprefine.shopsim  # noqa: F401
    import steprefine.toytree  # noqa: F401

    try:
        return registered_environments[env_id]
    except KeyError:
        raise ConfigurationError(
            f'Unknown environment `{env_id}`, expected one of {sorted(registered_environments)}.',
            key_path='env',
        )
