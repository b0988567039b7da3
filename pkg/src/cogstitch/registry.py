from __future__ import annotations

import inspect
import logging
from typing import TYPE_CHECKING, Any, Callable, Tuple, Type

if TYPE_CHECKING:
    from typing_extensions import Self

from .errors import AlreadyRegistered, NotRegistered

logger = logging.getLogger("cogstitch.registry")


class RegistryArgument:
    """Keyword arguments handed to a lazily constructed registration."""

    def __init__(self, **kwargs: Any) -> None:
        self.klass: Any = None
        self.kwargs = kwargs

    def for_service(self, klass: Any) -> Self:
        self.klass = klass
        return self

    def unwrap(self) -> Tuple[Any, dict[str, Any]]:
        return self.klass, dict(self.kwargs)


class Registry:
    """
    Process-wide lookup of implementations by protocol and namespace.

    Environments are registered under the environment protocol with their string id
    as namespace, training methods under the method protocol with the method id.
    Registered classes are constructed on every resolve so callers never share state.
    """

    __default_namespace: str = "default"
    __instance = None
    __services: dict[Type, dict[str, Any]] = {}
    __raise_exception_on_double_registrations: bool = False

    def __new__(cls) -> Self:
        if cls.__instance is None:
            cls.__instance = super(Registry, cls).__new__(cls)
        return cls.__instance

    def setconfig(self, values: dict[str, Any]) -> None:
        for attr, value in values.items():
            if attr in ["instance", "services"]:
                continue
            if hasattr(self, f"_Registry__{attr}"):
                setattr(self, f"_Registry__{attr}", value)

    def __slot(self, protocol: Type) -> dict[str, Any]:
        return self.__services.setdefault(protocol, {})

    def register(self, protocol: Type, implementation: Any, namespace: str | None = None) -> None:
        ns = namespace or self.__default_namespace
        slot = self.__slot(protocol)
        if self.__raise_exception_on_double_registrations and ns in slot:
            raise AlreadyRegistered(f"{protocol.__name__}[{ns}] is already registered.")
        slot[ns] = implementation
        logger.debug("registered %s[%s] -> %s", protocol.__name__, ns, implementation)

    def replace(self, protocol: Type, implementation: Any, namespace: str | None = None) -> None:
        self.__slot(protocol)[namespace or self.__default_namespace] = implementation

    def remove(self, protocol: Type, namespace: str | None = None) -> None:
        self.__slot(protocol).pop(namespace or self.__default_namespace, None)

    def resolve(self, protocol: Type, namespace: str | None = None, **kwargs: Any) -> Any | None:
        slot = self.__slot(protocol)
        ns = namespace or self.__default_namespace
        if ns not in slot:
            return None
        item = slot[ns]
        extra: dict[str, Any] = {}
        if isinstance(item, RegistryArgument):
            item, extra = item.unwrap()
        if inspect.isclass(item):
            extra.update(kwargs)
            return item(**extra)
        return item

    def namespaces(self, protocol: Type) -> list[str]:
        return sorted(self.__slot(protocol))

    def clear(self) -> None:
        self.__services.clear()
        self.__raise_exception_on_double_registrations = False

    def snapshot(self) -> dict[Type, dict[str, Any]]:
        return {protocol: dict(slot) for protocol, slot in self.__services.items()}

    def restore(self, snapshot: dict[Type, dict[str, Any]]) -> None:
        "Put back exactly the registrations of an earlier snapshot()."
        self.__services.clear()
        self.__services.update({protocol: dict(slot) for protocol, slot in snapshot.items()})


class Registration:
    def __init__(self, protocol: Type, namespace: str | None = None) -> None:
        self.protocol = protocol
        self.namespace = namespace
        self.arguments: RegistryArgument | None = None

    def with_arguments(self, arguments: RegistryArgument) -> Self:
        self.arguments = arguments
        return self

    def __call__(self, implementation: Type) -> Type:
        if self.arguments is not None:
            Registry().register(self.protocol, self.arguments.for_service(implementation), namespace=self.namespace)
        else:
            Registry().register(self.protocol, implementation, namespace=self.namespace)
        return implementation


def register_as(protocol: Type, namespace: str | None = None) -> Callable[[Type], Type]:
    "Shortcut for Registration(...)"
    return Registration(protocol, namespace)


def resolve(protocol: Type, namespace: str | None = None, **kwargs: Any) -> Any | None:
    "Shortcut for Registry().resolve(...)"
    return Registry().resolve(protocol, namespace, **kwargs)


def resolve_or_fail(protocol: Type, namespace: str, **kwargs: Any) -> Any:
    if (found := resolve(protocol, namespace, **kwargs)) is None:
        known = ", ".join(Registry().namespaces(protocol)) or "none"
        raise NotRegistered(f"No {protocol.__name__} registered as '{namespace}' (known: {known})")
    return found
