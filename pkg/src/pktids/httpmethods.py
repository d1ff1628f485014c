"""Fixed HTTP request-method vocabulary.

92 method tokens drawn from the IANA method registry, WebDAV/Exchange and
UPnP extensions, and request methods of HTTP-style protocols that packet
analyzers recognise on the same ports.  Index 0 is reserved for the missing
value token ``"0"``; the remaining tokens follow in sorted order.
"""

MISSING_METHOD = "0"

_METHODS = """
ACL BASELINE-CONTROL BIND CHECKIN CHECKOUT CONNECT COPY DELETE GET HEAD LABEL
LINK LOCK MERGE MKACTIVITY MKCALENDAR MKCOL MKREDIRECTREF MKWORKSPACE MOVE
OPTIONS ORDERPATCH PATCH POST PRI PROPFIND PROPPATCH PUT QUERY REBIND REPORT
SEARCH TRACE UNBIND UNCHECKOUT UNLINK UNLOCK UPDATE UPDATEREDIRECTREF
VERSION-CONTROL
BCOPY BDELETE BMOVE BPROPFIND BPROPPATCH NOTIFY POLL SUBSCRIBE UNSUBSCRIBE
X-MS-ENUMATTS M-SEARCH M-POST
RPC_CONNECT RPC_IN_DATA RPC_OUT_DATA RPC_ECHO_DATA SSTP_DUPLEX_POST CCM_POST
PUTIX BITS_POST DEBUG TRACK PURGE BAN SHOWMETHOD TEXTSEARCH SPACEJUMP
DESCRIBE ANNOUNCE GET_PARAMETER SET_PARAMETER PAUSE PLAY PLAY_NOTIFY RECORD
REDIRECT SETUP TEARDOWN
INVITE ACK BYE CANCEL REGISTER INFO PRACK REFER MESSAGE PUBLISH
REQMOD RESPMOD BREW WHEN
"""

HTTP_METHODS: tuple[str, ...] = tuple(sorted(set(_METHODS.split())))
assert len(HTTP_METHODS) == 92

METHOD_VOCAB: tuple[str, ...] = (MISSING_METHOD,) + HTTP_METHODS
METHOD_INDEX: dict[str, int] = {m: i for i, m in enumerate(METHOD_VOCAB)}


def method_index(token) -> int:
    """Embedding index for a method token; unknown or missing tokens give 0."""
    if token is None:
        return 0
    return METHOD_INDEX.get(str(token), 0)
