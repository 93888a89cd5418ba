"""Rooted directory tree standing in for one machine's filesystem.

Callers use absolute *virtual* paths (``/home/alice/run``). Each one maps
under ``root`` and is only usable if, after resolving symlinks, it lies
inside one of the acting user's areas (``/home/<user>``, ``/scratch/<user>``).
``..`` components are refused outright.

Ownership is bookkeeping only: the host uid never changes.
"""

from __future__ import annotations

import contextlib
import datetime as dt
import logging
import os
import posixpath
import re
import shutil
import stat
import threading
import time
from collections import defaultdict
from pathlib import Path

logger = logging.getLogger(__name__)

AREAS = ("home", "scratch")
MODE_RE = re.compile(r"^[0-7]{3,4}$")


class SandboxError(Exception):
    status = 400
    posix = "Invalid argument"

    def __init__(self, path, detail=None):
        self.path = path
        super().__init__(f"cannot access '{path}': {detail or self.posix}")


class PathEscape(SandboxError):
    posix = "Path is outside the permitted sandbox"


class NotFound(SandboxError):
    status = 404
    posix = "No such file or directory"


class AlreadyExists(SandboxError):
    posix = "File exists"


class NotADirectory(SandboxError):
    posix = "Not a directory"


class IsADirectory(SandboxError):
    posix = "Is a directory"


class DirectoryNotEmpty(SandboxError):
    posix = "Directory not empty"


class PermissionDenied(SandboxError):
    status = 403
    posix = "Permission denied"


class InvalidArgument(SandboxError):
    pass


class Unavailable(SandboxError):
    status = 503
    posix = "Filesystem unavailable"


_ERRNO = {
    2: NotFound,
    13: PermissionDenied,
    1: PermissionDenied,
    17: AlreadyExists,
    20: NotADirectory,
    21: IsADirectory,
    39: DirectoryNotEmpty,
}


def _from_oserror(exc: OSError, vpath):
    cls = _ERRNO.get(exc.errno, SandboxError)
    return cls(vpath, None if cls is not SandboxError else exc.strerror)


class Sandbox:
    def __init__(self, root, users: dict[str, str] | None = None, groups=None):
        """``users`` maps username to primary group."""
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.root = self.root.resolve()
        self.users = dict(users or {})
        self.groups = set(groups or ()) | set(self.users.values()) | {"root"}
        self.latency = 0.0
        self.available = True
        self._meta: dict[str, tuple[str, str]] = {}
        self._meta_lock = threading.Lock()
        self._path_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()
        for user in self.users:
            self.ensure_user(user)

    # -- setup ---------------------------------------------------------
    def ensure_user(self, user, group=None):
        if user not in self.users:
            self.users[user] = group or user
            self.groups.add(self.users[user])
        for area in AREAS:
            (self.root / area / user).mkdir(parents=True, exist_ok=True)

    def home(self, user) -> str:
        return f"/home/{user}"

    # -- path handling -------------------------------------------------
    def _areas(self, user):
        return [os.path.realpath(self.root / area / user) for area in AREAS]

    def check_vpath(self, vpath) -> str:
        if not isinstance(vpath, str) or not vpath:
            raise InvalidArgument(vpath, "empty path")
        if "\x00" in vpath:
            raise InvalidArgument(vpath.replace("\x00", "\\0"), "NUL byte in path")
        if not vpath.startswith("/"):
            raise InvalidArgument(vpath, "path must be absolute")
        parts = vpath.split("/")
        if ".." in parts:
            raise PathEscape(vpath, "parent-directory traversal is not allowed")
        return posixpath.normpath(vpath)

    def resolve(self, user, vpath, follow=True, strict_inside=False) -> Path:
        """Map a virtual path to a host path the user may touch.

        With ``follow=False`` the final component is not dereferenced, so
        operations on a symlink itself never leave the parent directory.
        ``strict_inside`` rejects the area roots themselves.
        """
        norm = self.check_vpath(vpath)
        host = os.path.join(self.root, norm.lstrip("/"))
        if follow:
            resolved = os.path.realpath(host)
        else:
            parent, name = os.path.split(host)
            resolved = os.path.join(os.path.realpath(parent), name) if name else os.path.realpath(host)
        root = str(self.root)
        if not _is_within(resolved, root):
            raise PathEscape(vpath)
        if user is not None:
            areas = self._areas(user)
            if strict_inside:
                ok = any(_is_within(resolved, a) and resolved != a for a in areas)
            else:
                ok = any(_is_within(resolved, a) for a in areas)
            if not ok:
                raise PathEscape(vpath)
        return Path(resolved)

    def to_virtual(self, host) -> str:
        rel = os.path.relpath(host, self.root)
        return "/" if rel == "." else "/" + rel.replace(os.sep, "/")

    # -- bookkeeping ---------------------------------------------------
    def _enter(self):
        if not self.available:
            raise Unavailable("/")
        if self.latency:
            time.sleep(self.latency)

    @contextlib.contextmanager
    def _locked(self, *paths):
        with self._locks_guard:
            locks = [self._path_locks[str(p)] for p in sorted({str(p) for p in paths})]
        for lk in locks:
            lk.acquire()
        try:
            yield
        finally:
            for lk in reversed(locks):
                lk.release()

    def _rel(self, host) -> str:
        return os.path.relpath(host, self.root)

    def _default_owner(self, host):
        parts = Path(self._rel(host)).parts
        if len(parts) >= 2 and parts[0] in AREAS and parts[1] in self.users:
            return parts[1], self.users[parts[1]]
        return "root", "root"

    def owner_of(self, host) -> tuple[str, str]:
        with self._meta_lock:
            rec = self._meta.get(self._rel(host))
        return rec or self._default_owner(host)

    def _set_owner(self, host, owner, group):
        with self._meta_lock:
            self._meta[self._rel(host)] = (owner, group)

    def _meta_move(self, src, dst):
        s, d = self._rel(src), self._rel(dst)
        with self._meta_lock:
            for key in [k for k in self._meta if k == s or k.startswith(s + os.sep)]:
                self._meta[d + key[len(s):]] = self._meta.pop(key)

    def _meta_copy(self, src, dst):
        s, d = self._rel(src), self._rel(dst)
        with self._meta_lock:
            for key in [k for k in self._meta if k == s or k.startswith(s + os.sep)]:
                self._meta[d + key[len(s):]] = self._meta[key]

    def _meta_drop(self, host):
        s = self._rel(host)
        with self._meta_lock:
            for key in [k for k in self._meta if k == s or k.startswith(s + os.sep)]:
                del self._meta[key]

    # -- queries -------------------------------------------------------
    def probe(self):
        self._enter()
        os.stat(self.root)
        return True

    def _entry(self, host: Path, name: str) -> dict:
        st = os.lstat(host)
        owner, group = self.owner_of(host)
        if stat.S_ISLNK(st.st_mode):
            kind = "l"
        elif stat.S_ISDIR(st.st_mode):
            kind = "d"
        else:
            kind = "-"
        entry = {
            "name": name,
            "type": kind,
            "size": st.st_size,
            "permissions": stat.filemode(st.st_mode)[1:],
            "owner": owner,
            "group": group,
            "last_modified": dt.datetime.fromtimestamp(st.st_mtime, dt.timezone.utc).isoformat(timespec="seconds"),
        }
        if kind == "l":
            entry["link_target"] = self._virtual_link(os.readlink(host))
        return entry

    def _virtual_link(self, raw):
        if os.path.isabs(raw) and _is_within(raw, str(self.root)):
            return self.to_virtual(raw)
        return raw

    def ls(self, user, vpath, show_hidden=False) -> list[dict]:
        self._enter()
        host = self.resolve(user, vpath, follow=False)
        try:
            st = os.lstat(host)
        except OSError as exc:
            raise _from_oserror(exc, vpath) from None
        if stat.S_ISLNK(st.st_mode):
            target = self.resolve(user, vpath, follow=True)
            if not target.is_dir():
                return [self._entry(host, host.name)]
            host = target
        elif not stat.S_ISDIR(st.st_mode):
            return [self._entry(host, host.name)]
        try:
            names = sorted(os.listdir(host))
        except OSError as exc:
            raise _from_oserror(exc, vpath) from None
        return [self._entry(host / n, n) for n in names if show_hidden or not n.startswith(".")]

    def stat(self, user, vpath, follow=True) -> os.stat_result:
        self._enter()
        host = self.resolve(user, vpath, follow=follow)
        try:
            return os.stat(host) if follow else os.lstat(host)
        except OSError as exc:
            raise _from_oserror(exc, vpath) from None

    def exists(self, user, vpath) -> bool:
        try:
            self.stat(user, vpath, follow=False)
        except NotFound:
            return False
        return True

    def file_type(self, user, vpath) -> str:
        self._enter()
        host = self.resolve(user, vpath, follow=False)
        try:
            st = os.lstat(host)
        except OSError as exc:
            raise _from_oserror(exc, vpath) from None
        if stat.S_ISLNK(st.st_mode):
            return f"symbolic link to {self._virtual_link(os.readlink(host))}"
        if stat.S_ISDIR(st.st_mode):
            return "directory"
        with open(host, "rb") as fh:
            head = fh.read(64 * 1024)
        return classify(head)

    def read(self, user, vpath) -> bytes:
        self._enter()
        host = self.resolve(user, vpath)
        try:
            with open(host, "rb") as fh:
                return fh.read()
        except OSError as exc:
            raise _from_oserror(exc, vpath) from None

    # -- mutations -----------------------------------------------------
    def mkdir(self, user, vpath, parents=False):
        self._enter()
        host = self.resolve(user, vpath, follow=False, strict_inside=True)
        if host.is_symlink():
            # mkdir -p dereferences an existing link; its target must be inside too
            self.resolve(user, vpath, follow=True, strict_inside=True)
        with self._locked(host):
            try:
                if parents:
                    created = []
                    p = host
                    while not p.exists():
                        created.append(p)
                        p = p.parent
                    host.mkdir(parents=True, exist_ok=True)
                    for c in created:
                        self._record_creation(user, c)
                else:
                    host.mkdir()
                    self._record_creation(user, host)
            except FileExistsError:
                raise AlreadyExists(vpath) from None
            except OSError as exc:
                raise _from_oserror(exc, vpath) from None

    def _record_creation(self, user, host):
        if user is None:
            return
        if self._default_owner(host) != (user, self.users.get(user, user)):
            self._set_owner(host, user, self.users.get(user, user))

    def write(self, user, vpath, data: bytes):
        self._enter()
        host = self.resolve(user, vpath, strict_inside=True)
        if host.is_dir():
            raise IsADirectory(vpath)
        with self._locked(host):
            tmp = host.with_name(f".{host.name}.part")
            try:
                with open(tmp, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, host)
            except OSError as exc:
                with contextlib.suppress(OSError):
                    tmp.unlink()
                raise _from_oserror(exc, vpath) from None
            self._record_creation(user, host)

    def rename(self, user, src, dst):
        self._enter()
        s = self.resolve(user, src, follow=False, strict_inside=True)
        d = self.resolve(user, dst, follow=False, strict_inside=True)
        with self._locked(s, d):
            if not os.path.lexists(s):
                raise NotFound(src)
            try:
                os.rename(s, d)
            except OSError as exc:
                raise _from_oserror(exc, dst) from None
            self._meta_drop(d)
            self._meta_move(s, d)

    def chmod(self, user, vpath, mode: str):
        if not isinstance(mode, str) or not MODE_RE.match(mode):
            raise InvalidArgument(vpath, f"invalid mode: '{mode}'")
        self._enter()
        host = self.resolve(user, vpath)
        with self._locked(host):
            try:
                os.chmod(host, int(mode, 8))
            except OSError as exc:
                raise _from_oserror(exc, vpath) from None

    def chown(self, user, vpath, owner=None, group=None):
        if not owner and not group:
            raise InvalidArgument(vpath, "owner or group required")
        if owner and owner not in self.users:
            raise InvalidArgument(vpath, f"invalid user: '{owner}'")
        if group and group not in self.groups:
            raise InvalidArgument(vpath, f"invalid group: '{group}'")
        self._enter()
        host = self.resolve(user, vpath, follow=False)
        if not os.path.lexists(host):
            raise NotFound(vpath)
        with self._locked(host):
            cur_owner, cur_group = self.owner_of(host)
            self._set_owner(host, owner or cur_owner, group or cur_group)

    def symlink(self, user, target: str, link_vpath):
        self._enter()
        link = self.resolve(user, link_vpath, follow=False, strict_inside=True)
        if not isinstance(target, str) or not target or "\x00" in target:
            raise InvalidArgument(link_vpath, "invalid link target")
        # the target must lie in the user's areas even if it does not exist yet
        if target.startswith("/"):
            lexical = self.check_vpath(target)
        else:
            lexical = posixpath.normpath(posixpath.join(posixpath.dirname(self.check_vpath(link_vpath)), target))
            if lexical.startswith("/.."):
                raise PathEscape(target)
        self.resolve(user, lexical)
        raw = os.path.join(self.root, lexical.lstrip("/")) if target.startswith("/") else target
        with self._locked(link):
            try:
                os.symlink(raw, link)
            except FileExistsError:
                raise AlreadyExists(link_vpath) from None
            except OSError as exc:
                raise _from_oserror(exc, link_vpath) from None
            self._record_creation(user, link)

    # recursive operations: only the data mover uses these
    def remove(self, user, vpath):
        self._enter()
        host = self.resolve(user, vpath, follow=False, strict_inside=True)
        with self._locked(host):
            if not os.path.lexists(host):
                raise NotFound(vpath)
            try:
                if host.is_dir() and not host.is_symlink():
                    shutil.rmtree(host)
                else:
                    host.unlink()
            except OSError as exc:
                raise _from_oserror(exc, vpath) from None
            self._meta_drop(host)

    def move(self, user, src, dst):
        self._enter()
        s = self.resolve(user, src, follow=False, strict_inside=True)
        d = self.resolve(user, dst, follow=False, strict_inside=True)
        if not os.path.lexists(s):
            raise NotFound(src)
        if d.is_dir() and not d.is_symlink():
            d = self.resolve(user, posixpath.join(self.check_vpath(dst), s.name), follow=False, strict_inside=True)
        if _is_within(str(d), str(s)):
            raise InvalidArgument(dst, "cannot move a directory into itself")
        with self._locked(s, d):
            try:
                shutil.move(str(s), str(d))
            except OSError as exc:
                raise _from_oserror(exc, dst) from None
            self._meta_drop(d)
            self._meta_move(s, d)

    def rsync(self, user, src, dst):
        """Copy ``src`` onto ``dst`` like ``rsync -a src/ dst/`` (merge, links kept)."""
        self._enter()
        s = self.resolve(user, src, follow=False)
        d = self.resolve(user, dst, follow=False, strict_inside=True)
        if not os.path.lexists(s):
            raise NotFound(src)
        if s.is_dir() and not s.is_symlink():
            if _is_within(str(d), str(s)):
                raise InvalidArgument(dst, "destination is inside the source")
            with self._locked(s, d):
                try:
                    shutil.copytree(s, d, symlinks=True, dirs_exist_ok=True)
                except (OSError, shutil.Error) as exc:
                    raise SandboxError(dst, str(exc)) from None
                self._meta_copy(s, d)
            return
        if d.is_dir() and not d.is_symlink():
            d = d / s.name
        with self._locked(s, d):
            try:
                if s.is_symlink():
                    if os.path.lexists(d):
                        d.unlink()
                    os.symlink(os.readlink(s), d)
                else:
                    shutil.copy2(s, d)
            except OSError as exc:
                raise _from_oserror(exc, dst) from None
            self._meta_copy(s, d)

    # -- system access (scheduler output files) -------------------------
    def system_write(self, vpath, data: bytes, owner=None):
        """Write on behalf of a system daemon, still confined to ``owner``'s areas."""
        host = self.resolve(owner, vpath, strict_inside=owner is not None)
        host.parent.mkdir(parents=True, exist_ok=True)
        host.write_bytes(data)


def _is_within(path: str, root: str) -> bool:
    return path == root or path.startswith(root.rstrip(os.sep) + os.sep)


_MAGIC = (
    (b"\x89PNG\r\n\x1a\n", "PNG image data"),
    (b"\x1f\x8b", "gzip compressed data"),
    (b"\x7fELF", "ELF executable"),
    (b"%PDF-", "PDF document"),
    (b"PK\x03\x04", "Zip archive data"),
    (b"\x89HDF\r\n\x1a\n", "Hierarchical Data Format (version 5) data"),
)

_SCRIPT_KINDS = {
    "bash": "Bourne-Again shell script",
    "sh": "POSIX shell script",
    "python": "Python script",
    "python3": "Python script",
}

_TEXT_BYTES = set(range(0x20, 0x7F)) | {0x09, 0x0A, 0x0C, 0x0D, 0x1B, 0x08}


def classify(head: bytes) -> str:
    """Small subset of file(1) classification."""
    if not head:
        return "empty"
    for magic, label in _MAGIC:
        if head.startswith(magic):
            return label
    if all(b in _TEXT_BYTES for b in head):
        text = "ASCII text"
    else:
        if any(b < 0x80 and b not in _TEXT_BYTES for b in head):
            return "data"
        try:
            head.decode("utf-8")
        except UnicodeDecodeError as exc:
            # a multibyte sequence cut at the read boundary is still text
            if exc.reason != "unexpected end of data":
                return "data"
        text = "UTF-8 Unicode text"
    if head.startswith(b"#!"):
        interp = head[2:].split(b"\n", 1)[0].decode("ascii", "replace").split()
        if interp:
            name = posixpath.basename(interp[0])
            if name == "env" and len(interp) > 1:
                name = interp[1]
            kind = _SCRIPT_KINDS.get(name)
            if kind:
                return f"{kind}, {text} executable"
        return f"a {text} script, executable"
    return text
